"""Training diagnostics: evaluation metrics, collapse detection, repetition.

Collapse detection follows two signals. An early warning fires when the
mean in-group reward std stays below a floor for several consecutive steps
(or, if enabled, when entropy changes direction erratically). Irreversible
collapse is flagged when the gradient norm jumps above a multiple of its
rolling median. All thresholds are configurable.
"""

from __future__ import annotations

import csv
import math
from collections import Counter, deque
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .envs.base import Environment
from .errors import SequencingError
from .policy import Policy
from .rollout import RolloutSettings, Trajectory, episode_seeds, run_episodes


@dataclass
class MetricsRecord:
    step: int
    success_rate: float = math.nan
    mean_token_entropy: float = math.nan
    mean_in_group_reward_std: float = math.nan
    mean_think_length: float = math.nan
    mean_total_length: float = math.nan
    gradient_norm: float = math.nan
    kl_to_initial: float = math.nan
    mean_reward: float = math.nan
    format_rate: float = math.nan
    retained_groups: int = 0
    gradient_steps: int = 0
    policy_version: int = 0

    def __post_init__(self):
        if not math.isnan(self.success_rate) and not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success_rate must lie in [0, 1]")
        for name in ("mean_think_length", "mean_total_length"):
            v = getattr(self, name)
            if not math.isnan(v) and v < 0:
                raise ValueError(f"{name} must be >= 0")


COLUMNS = [f.name for f in fields(MetricsRecord)]
_INT_COLUMNS = {"step", "retained_groups", "gradient_steps", "policy_version"}


def _fmt(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def write_metrics_csv(path: str | Path, records: Iterable[MetricsRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for rec in records:
            writer.writerow([_fmt(getattr(rec, c)) for c in COLUMNS])


def read_metrics_csv(path: str | Path) -> list[MetricsRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "step" not in reader.fieldnames:
            raise ValueError(f"{path}: missing header with a 'step' column")
        for lineno, row in enumerate(reader, 2):
            kwargs = {}
            try:
                for key, raw in row.items():
                    if key not in COLUMNS:
                        continue
                    if key in _INT_COLUMNS:
                        kwargs[key] = int(raw)
                    else:
                        kwargs[key] = float(raw) if raw not in ("", None) else math.nan
                records.append(MetricsRecord(**kwargs))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return records


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalResult:
    success_rate: float
    mean_token_entropy: float
    mean_think_length: float
    mean_total_length: float
    mean_reward: float
    format_rate: float
    kl_to_initial: float
    trajectories: list[Trajectory] = field(repr=False, default_factory=list)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("trajectories")
        return d


def evaluate(policy: Policy, env: Environment, instance_ids: Sequence[int], *, temperature: float = 0.5,
             seed: int = 0, settings: RolloutSettings | None = None,
             initial: Policy | None = None) -> EvalResult:
    """One episode per fixed instance; success is the environment's own predicate."""
    settings = replace(settings or RolloutSettings(), temperature=temperature, score_all_tokens=False)
    jobs = [(i, int(iid), *episode_seeds(seed, 0, i, 0)) for i, iid in enumerate(instance_ids)]
    trajs = run_episodes(policy, env, jobs, settings, 0)
    entropies = np.concatenate([t.entropies for t in trajs])
    turns = [turn for t in trajs for turn in t.turns]
    kl = math.nan
    if initial is not None:
        diffs = []
        for t in trajs:
            pos = np.flatnonzero(t.generated)
            diffs.append(t.logprobs[pos] - initial.sequence_log_probs(t.tokens, pos, temperature))
        kl = float(np.mean(np.concatenate(diffs)))
    return EvalResult(
        success_rate=float(np.mean([t.success for t in trajs])),
        mean_token_entropy=float(entropies.mean()) if len(entropies) else 0.0,
        mean_think_length=float(np.mean([t.think_length for t in trajs])),
        mean_total_length=float(np.mean([t.num_generated for t in trajs])),
        mean_reward=float(np.mean([t.total_reward for t in trajs])),
        format_rate=float(np.mean([turn.parse.format_ok for turn in turns])),
        kl_to_initial=kl,
        trajectories=trajs,
    )


def mean_in_group_std(group_rewards: Sequence[np.ndarray]) -> float:
    return float(np.mean([np.std(r) for r in group_rewards]))


# -- collapse detection -------------------------------------------------------

@dataclass(frozen=True)
class CollapseConfig:
    warn_std_floor: float = 0.05
    warn_patience: int = 5
    spike_factor: float = 10.0
    spike_window: int = 50
    min_history: int = 10
    # erraticity rule: more than this many entropy-delta sign flips within the window
    erratic_flips: int | None = None
    erratic_window: int = 10


@dataclass
class CollapseState:
    early_warning: bool = False
    warning_step: int | None = None
    warning_metric: str | None = None
    irreversible: bool = False
    irreversible_step: int | None = None
    last_step: int | None = None
    low_std_run: int = 0
    grad_history: deque = field(default_factory=deque)
    entropy_history: deque = field(default_factory=deque)
    grad_median: float = math.nan

    def copy(self) -> "CollapseState":
        return replace(self, grad_history=deque(self.grad_history), entropy_history=deque(self.entropy_history))

    def summary(self) -> dict:
        return {"early_warning_step": self.warning_step, "early_warning_metric": self.warning_metric,
                "collapse_step": self.irreversible_step}


def _sign_flips(values: Sequence[float]) -> int:
    d = np.sign(np.diff(np.asarray(values)))
    d = d[d != 0]
    return int(np.sum(d[1:] != d[:-1]))


def update_collapse_state(state: CollapseState, record: MetricsRecord,
                          config: CollapseConfig = CollapseConfig()) -> CollapseState:
    if state.last_step is not None and record.step <= state.last_step:
        raise SequencingError(f"step {record.step} arrived after step {state.last_step}")
    s = state.copy()
    s.last_step = record.step

    def warn(metric: str) -> None:
        if not s.early_warning:
            s.early_warning, s.warning_step, s.warning_metric = True, record.step, metric

    std = record.mean_in_group_reward_std
    if not math.isnan(std):
        s.low_std_run = s.low_std_run + 1 if std < config.warn_std_floor else 0
        if s.low_std_run >= config.warn_patience:
            warn("mean_in_group_reward_std")

    ent = record.mean_token_entropy
    if not math.isnan(ent):
        s.entropy_history.append(ent)
        while len(s.entropy_history) > config.erratic_window:
            s.entropy_history.popleft()
        if config.erratic_flips is not None and len(s.entropy_history) == config.erratic_window \
                and _sign_flips(s.entropy_history) > config.erratic_flips:
            warn("mean_token_entropy")

    g = record.gradient_norm
    if not math.isnan(g):
        if len(s.grad_history) >= config.min_history:
            s.grad_median = float(np.median(s.grad_history))
            if g > config.spike_factor * s.grad_median and not s.irreversible:
                warn("gradient_norm")
                s.irreversible, s.irreversible_step = True, record.step
        s.grad_history.append(g)
        while len(s.grad_history) > config.spike_window:
            s.grad_history.popleft()
    return s


def replay(records: Iterable[MetricsRecord], config: CollapseConfig = CollapseConfig()) -> CollapseState:
    state = CollapseState()
    for rec in records:
        state = update_collapse_state(state, rec, config)
    return state


# -- repetition ---------------------------------------------------------------

def repetition_score(corpus) -> float:
    """Fraction of responses whose token sequence also occurs elsewhere in the corpus.

    ``corpus`` holds trajectories (every turn's response counts) or raw
    token sequences.
    """
    responses = []
    for item in corpus:
        if isinstance(item, Trajectory):
            responses.extend(tuple(t.generated) for t in item.turns)
        else:
            responses.append(tuple(item))
    if len(responses) < 2:
        raise ValueError("repetition needs at least two responses")
    counts = Counter(responses)
    return sum(1 for r in responses if counts[r] > 1) / len(responses)
