"""Beam search over architectures with depth-limited lookahead and backtracking.

Each round expands every beam state ``depth_limit`` levels deep using the
morph actions, ranks the deepest leaves by training accuracy, and promotes
the first ``beam_width`` distinct depth-1 ancestors of those leaves. A
promoted state must beat the best accepted accuracy by more than
``improvement_epsilon``; the search stops when none does, when nothing can
be expanded, or when the expansion budget is spent.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

from . import morph, net
from .errors import DivergedError
from .trainer import TrainConfig, derive_seed, train

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "round",
    "state_id",
    "parent_id",
    "action",
    "depth",
    "train_accuracy",
    "param_count",
    "selected",
)


@dataclass(frozen=True)
class BeamConfig:
    beam_width: int = 1
    depth_limit: int = 1
    finetune_epochs: int = 10
    improvement_epsilon: float = 1e-4
    max_conv_layers: int = 8
    max_filters: int = 512
    max_expansions: int = 50
    root_seed: int = 0
    post_promotion_epochs: int = 0

    def __post_init__(self):
        for name in ("beam_width", "depth_limit", "finetune_epochs", "max_conv_layers",
                     "max_filters", "max_expansions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.improvement_epsilon < 0 or self.post_promotion_epochs < 0:
            raise ValueError("improvement_epsilon and post_promotion_epochs must be >= 0")


@dataclass(eq=False)
class SearchState:
    id: int
    arch: net.Architecture
    params: net.ParamSet | None
    train_accuracy: float
    parent_id: int | None
    action: str | None
    depth: int
    seed: int
    path: tuple = ()

    @property
    def param_count(self):
        return net.param_count(self.arch)

    def rank_key(self):
        # best first: accuracy, then fewer parameters, then action path
        return (-self.train_accuracy, self.param_count, self.path)


def heuristic(parent: SearchState, child: SearchState) -> float:
    return child.train_accuracy - parent.train_accuracy


class TrainingEvaluator:
    """Scores states by actually training them on ``train_split = (x, y)``."""

    def __init__(self, train_split, train_config: TrainConfig, finetune_epochs=10,
                 post_promotion_epochs=0):
        self.split = train_split
        self.config = train_config
        self.finetune_epochs = finetune_epochs
        self.post_promotion_epochs = post_promotion_epochs
        self.histories = {}

    def _train(self, arch, params, seed, epochs):
        cfg = replace(self.config, seed=derive_seed(seed, "train", 0))
        params, history = train(arch, params, self.split, cfg, epochs=epochs)
        return params, history

    def root(self, arch, seed):
        params = net.init_params(arch, derive_seed(seed, "init", 0))
        params, history = self._train(arch, params, seed, self.config.epochs)
        self.histories["root"] = history
        return params, history.train_accuracy[-1]

    def child(self, arch, params, seed, path):
        params, history = self._train(arch, params, seed, self.finetune_epochs)
        return params, history.train_accuracy[-1]

    def promote(self, arch, params, seed):
        params, history = self._train(arch, params, derive_seed(seed, "promote", 0),
                                      self.post_promotion_epochs)
        return params, history.train_accuracy[-1]


class AccuracyTable:
    """Stub evaluator: accuracy looked up by the ``/``-joined action path.

    Parameters are still morphed but never trained.
    """

    def __init__(self, table):
        self.table = dict(table)

    def root(self, arch, seed):
        return net.init_params(arch, seed), self.table[""]

    def child(self, arch, params, seed, path):
        return params, self.table["/".join(path)]

    def promote(self, arch, params, seed):
        raise NotImplementedError("table evaluator has no post-promotion training")


@dataclass
class SearchResult:
    best: SearchState
    initial: SearchState
    log: list
    rounds: int
    expansions: int
    stop_reason: str
    states: dict = field(repr=False, default_factory=dict)

    def log_csv(self):
        return log_to_csv(self.log)

    def lineage(self, state_id):
        chain = [self.states[state_id]]
        while chain[-1].parent_id is not None:
            chain.append(self.states[chain[-1].parent_id])
        return chain[::-1]


def log_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([
            r["round"], r["state_id"], "" if r["parent_id"] is None else r["parent_id"],
            r["action"] or "root", r["depth"], repr(r["train_accuracy"]),
            r["param_count"], int(r["selected"]),
        ])
    return buf.getvalue()


class BeamSearch:
    def __init__(self, evaluator, config: BeamConfig):
        self.evaluator = evaluator
        self.config = config
        self.states = {}
        self.log = []
        self.expansions = 0
        self.round = 0
        self._children = {}
        self.root = None

    def _new_state(self, **kw):
        state = SearchState(id=len(self.states), **kw)
        self.states[state.id] = state
        return state

    def _record(self, state, selected):
        self.log.append(dict(
            round=self.round, state_id=state.id, parent_id=state.parent_id,
            action=state.action, depth=state.depth, train_accuracy=state.train_accuracy,
            param_count=state.param_count, selected=selected,
        ))

    def make_root(self, arch):
        seed = self.config.root_seed
        try:
            params, acc = self.evaluator.root(arch, seed)
        except DivergedError as e:
            raise DivergedError(e.epoch, state_id=len(self.states)) from None
        root = self._new_state(arch=arch, params=params, train_accuracy=acc,
                               parent_id=None, action=None, depth=0, seed=seed)
        self._record(root, True)
        self.root = root
        return root

    def expand(self, state):
        """Children of ``state`` under every applicable action, fine-tuned.

        Results are cached; child seeds are pure functions of the parent seed,
        so re-expanding would reproduce them exactly.
        """
        if state.id in self._children:
            return self._children[state.id]
        cfg = self.config
        allowed = morph.applicable_actions(state.arch, cfg.max_filters, cfg.max_conv_layers)
        skipped = [a for a in morph.ACTIONS if a not in allowed]
        if skipped:
            log.info("state %d: skipping capped actions %s", state.id, ", ".join(skipped))
        self.expansions += 1
        children = []
        for action in allowed:
            depth = state.depth + 1
            seed = derive_seed(state.seed, action, depth)
            arch, params = morph.apply_action(action, state.arch, state.params, seed,
                                              cfg.max_filters, cfg.max_conv_layers)
            path = state.path + (action,)
            try:
                params, acc = self.evaluator.child(arch, params, seed, path)
            except DivergedError as e:
                raise DivergedError(e.epoch, state_id=len(self.states)) from None
            child = self._new_state(arch=arch, params=params, train_accuracy=acc,
                                    parent_id=state.id, action=action, depth=depth,
                                    seed=seed, path=path)
            self._record(child, False)
            children.append(child)
        self._children[state.id] = children
        return children

    def lookahead_and_backtrack(self, beam):
        """Up to ``beam_width`` distinct children of the beam, chosen via their best leaves.

        A leaf is a node ``depth_limit`` levels below its beam state, or a
        shallower node that has no applicable action.
        """
        leaves = []
        for state in beam:
            frontier = [(c, c) for c in self.expand(state)]
            for _ in range(1, self.config.depth_limit):
                deeper = []
                for node, ancestor in frontier:
                    kids = self.expand(node)
                    if kids:
                        deeper.extend((k, ancestor) for k in kids)
                    else:
                        leaves.append((node, ancestor))
                frontier = deeper
            leaves.extend(frontier)
        leaves.sort(key=lambda pair: pair[0].rank_key())
        chosen, seen = [], set()
        for _, ancestor in leaves:
            if ancestor.id not in seen:
                seen.add(ancestor.id)
                chosen.append(ancestor)
                if len(chosen) == self.config.beam_width:
                    break
        return chosen

    def _promote(self, state):
        params, acc = self.evaluator.promote(state.arch, state.params, state.seed)
        state.params, state.train_accuracy = params, acc
        # cached descendants were derived from the old parameters
        self._children.pop(state.id, None)
        return state

    def _release(self, beam, best):
        """Drop parameters no later round can use; the root and best are always kept."""
        keep, stack = set(), [s.id for s in beam]
        while stack:
            sid = stack.pop()
            keep.add(sid)
            stack.extend(c.id for c in self._children.get(sid, ()))
        keep.update((best.id, self.root.id))
        self._children = {k: v for k, v in self._children.items() if k in keep}
        for sid, s in self.states.items():
            if sid not in keep:
                s.params = None

    def run(self, arch) -> SearchResult:
        cfg = self.config
        root = self.make_root(arch)
        best, beam = root, [root]
        while True:
            if self.expansions >= cfg.max_expansions:
                stop = "max_expansions"
                break
            self.round += 1
            candidates = self.lookahead_and_backtrack(beam)
            if not candidates:
                stop = "beam_empty"
                break
            if cfg.post_promotion_epochs:
                candidates = [self._promote(c) for c in candidates]
            threshold = best.train_accuracy + cfg.improvement_epsilon
            accepted = [c for c in candidates if c.train_accuracy > threshold]
            log.info("round %d: %d candidates, %d accepted (best %.4f)",
                     self.round, len(candidates), len(accepted), best.train_accuracy)
            if not accepted:
                stop = "no_improvement"
                break
            for c in accepted:
                self._record(c, True)
            best = min(accepted + [best], key=SearchState.rank_key)
            beam = accepted
            self._release(beam, best)
        return SearchResult(best=best, initial=root, log=self.log, rounds=self.round,
                            expansions=self.expansions, stop_reason=stop, states=self.states)


def run_search(dataset, train_config: TrainConfig, beam_config: BeamConfig,
               evaluator=None, activation="relu") -> SearchResult:
    """Train the initial network on ``dataset``'s train split and search from it."""
    x, y = dataset.arrays("train")
    if len(y) < 2 * beam_config.beam_width:
        raise ValueError(f"need at least {2 * beam_config.beam_width} training samples")
    if evaluator is None:
        evaluator = TrainingEvaluator((x, y), train_config, beam_config.finetune_epochs,
                                      beam_config.post_promotion_epochs)
    arch = net.initial_architecture(dataset.input_dims, dataset.num_classes, activation)
    return BeamSearch(evaluator, beam_config).run(arch)


def expansion_count(rows):
    """Number of expand calls recorded in a search log."""
    return len({r["parent_id"] for r in rows if not r["selected"] and r["parent_id"] is not None})


def check_monotone(rows, epsilon):
    """True when rounds never decrease and every selection beats the previous round's best."""
    best = None
    current_round = -1
    round_best = None
    for r in rows:
        if r["round"] < current_round:
            return False
        if r["round"] != current_round:
            current_round = r["round"]
            if round_best is not None:
                best = round_best
        if r["selected"]:
            if best is not None and not r["train_accuracy"] > best + epsilon:
                return False
            round_best = r["train_accuracy"] if round_best is None else max(round_best, r["train_accuracy"])
    return True


def parse_log_csv(text):
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(dict(
            round=int(rec["round"]), state_id=int(rec["state_id"]),
            parent_id=int(rec["parent_id"]) if rec["parent_id"] else None,
            action=None if rec["action"] == "root" else rec["action"],
            depth=int(rec["depth"]), train_accuracy=float(rec["train_accuracy"]),
            param_count=int(rec["param_count"]), selected=bool(int(rec["selected"])),
        ))
    return rows
