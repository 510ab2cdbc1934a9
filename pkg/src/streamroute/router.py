"""Per-timestamp routing: emit the cheap label, escalate, or defer.

The threshold strategy uses two dynamic thresholds. Escalation fires on a
label change, on low encoder confidence against a threshold that RISES
with the distance d = i - t_vlm since the last expert-emitted prediction,

    theta_enc(d) = 0.5 + d / (max_enc + 1) * 0.5,   1 <= d <= max_enc + 1,

or unconditionally at d = max_enc + 1. Deferral fires when the expert's
confidence falls below a threshold that DECAYS with the distance
d = i - max(t_enc, t_vlm) since the last emitted prediction,

    theta_vlm(d) = 1.0 - d / (max_defer + 1) * 0.5,  1 <= d <= max_defer + 1,

and is denied outright at d = max_defer + 1, so defer streaks are bounded.
Both comparisons are strict: a confidence exactly at the threshold emits.

The model strategy replaces each rule with a small MLP over the trailing
window of probability scores; the deferral cap still applies so a stream
can never stall.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .encoder import ScorerOutput
from .expert import ExpertError
from .nn import Adam, ParamSpec, glorot_init, mlp_backward, mlp_entries, mlp_forward

HISTORY_FILL = 0.5  # neutral probability used to pad missing history


def enc_threshold(d: int, max_enc: int) -> float:
    """Escalation threshold at distance d; 1.0 at the forced-call endpoint."""
    if max_enc < 0:
        raise ValueError(f"max_enc must be >= 0, got {max_enc}")
    if not 1 <= d <= max_enc + 1:
        raise ValueError(f"d={d} outside [1, {max_enc + 1}]")
    return 0.5 + d / (max_enc + 1) * 0.5


def vlm_threshold(d: int, max_defer: int) -> float:
    """Deferral threshold at distance d; 0.5 at the no-more-deferral endpoint."""
    if max_defer < 0:
        raise ValueError(f"max_defer must be >= 0, got {max_defer}")
    if not 1 <= d <= max_defer + 1:
        raise ValueError(f"d={d} outside [1, {max_defer + 1}]")
    return 1.0 - d / (max_defer + 1) * 0.5


@dataclass(frozen=True)
class RouterConfig:
    """Routing behavior knobs.

    deferral_source picks who may trigger a Defer: the expert's confidence
    ("expert", the full system), the encoder's own confidence with the
    expert disabled ("encoder"), or nobody ("none").
    """

    max_enc: int = 18
    max_defer: int = 6
    strategy: str = "threshold"  # "threshold" | "model"
    deferral_source: str = "expert"  # "expert" | "encoder" | "none"
    history_len: int = 33

    def __post_init__(self) -> None:
        if self.max_enc < 0 or self.max_defer < 0:
            raise ValueError("max_enc and max_defer must be >= 0")
        if self.strategy not in ("threshold", "model"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.deferral_source not in ("expert", "encoder", "none"):
            raise ValueError(f"unknown deferral_source {self.deferral_source!r}")
        if self.history_len < 1:
            raise ValueError(f"history_len must be >= 1, got {self.history_len}")


@dataclass(frozen=True)
class RoutingState:
    """Per-stream routing memory; advanced functionally by Router.step."""

    t_enc: int = -1
    t_vlm: int = -1
    last_emitted_label: int | None = None
    consecutive_defers: int = 0
    enc_history: tuple[float, ...] = ()
    expert_history: tuple[float, ...] = ()


@dataclass(frozen=True)
class Decision:
    """One routing outcome plus the bookkeeping the decision log wants."""

    action: str  # "emit" | "defer"
    label: int | None
    source: str | None  # "encoder" | "expert" | None
    escalated: bool
    enc_p: float
    expert_p: float | None = None
    theta_enc: float | None = None
    theta_vlm: float | None = None
    expert_failed: bool = False

    def __post_init__(self) -> None:
        if self.action not in ("emit", "defer"):
            raise ValueError(f"bad action {self.action!r}")
        if self.action == "emit" and (self.label is None or self.source is None):
            raise ValueError("emit decisions need a label and a source")
        if self.action == "defer" and self.source is not None:
            raise ValueError("defer decisions carry no source")


def _pushed(history: tuple[float, ...], p: float, cap: int) -> tuple[float, ...]:
    out = history + (float(p),)
    return out[-cap:] if len(out) > cap else out


class Router:
    """Sequential decision maker for one or many streams.

    Stateless itself — all per-stream memory lives in RoutingState — so one
    Router may serve concurrent streams.
    """

    def __init__(
        self,
        config: RouterConfig,
        route_model: "MetaRouter | None" = None,
        defer_model: "MetaRouter | None" = None,
    ):
        if config.strategy == "model" and route_model is None:
            raise ValueError("model strategy needs a trained route_model")
        self.config = config
        self.route_model = route_model
        self.defer_model = defer_model

    def initial_state(self) -> RoutingState:
        return RoutingState()

    def escalation_distance(self, state: RoutingState, i: int) -> int:
        return int(np.clip(i - state.t_vlm, 1, self.config.max_enc + 1))

    def deferral_distance(self, state: RoutingState, i: int) -> int:
        last = max(state.t_enc, state.t_vlm)
        return int(np.clip(i - last, 1, self.config.max_defer + 1))

    def should_escalate(self, state: RoutingState, enc_out: ScorerOutput, i: int) -> bool:
        """Threshold rule: label change, low confidence, or forced call."""
        d = self.escalation_distance(state, i)
        if state.last_emitted_label is None:
            return True
        if enc_out.label != state.last_emitted_label:
            return True
        if d == self.config.max_enc + 1:
            return True
        return enc_out.confidence < enc_threshold(d, self.config.max_enc)

    def should_defer(self, state: RoutingState, out: ScorerOutput, i: int) -> bool:
        """Threshold rule on whichever output the deferral source provides."""
        defer, _ = self._threshold_defer(state, float(out.confidence), i)
        return defer

    def _threshold_defer(
        self, state: RoutingState, p: float, i: int
    ) -> tuple[bool, float]:
        d = self.deferral_distance(state, i)
        theta = vlm_threshold(d, self.config.max_defer)
        if d == self.config.max_defer + 1:
            return False, theta
        return p < theta, theta

    def _model_defer(self, state: RoutingState, history: tuple[float, ...]) -> bool:
        if self.defer_model is None:
            return False
        # Liveness cap: even a model-driven defer streak must end.
        if state.consecutive_defers >= self.config.max_defer:
            return False
        return self.defer_model.predict_error(history)

    def step(
        self,
        state: RoutingState,
        enc_out: ScorerOutput,
        expert_fn: Callable[[], ScorerOutput] | None,
        i: int,
    ) -> tuple[Decision, RoutingState]:
        """Decide at timestamp i and advance the state.

        expert_fn (a no-arg callable closed over the current window) is
        invoked at most once; a typed ExpertError falls back to emitting
        the encoder's label with expert_failed set.
        """
        cfg = self.config
        enc_p = float(enc_out.confidence)
        enc_hist = _pushed(state.enc_history, enc_p, cfg.history_len)

        if cfg.deferral_source == "encoder" or expert_fn is None:
            return self._step_no_expert(state, enc_out, i, enc_hist)

        # Escalation decision.
        theta_enc: float | None = None
        if cfg.strategy == "model":
            escalate = self.route_model.predict_error(enc_hist)
        else:
            escalate = self.should_escalate(state, enc_out, i)
            theta_enc = enc_threshold(self.escalation_distance(state, i), cfg.max_enc)
        if not escalate:
            decision = Decision(
                "emit", enc_out.label, "encoder",
                escalated=False, enc_p=enc_p, theta_enc=theta_enc,
            )
            new_state = replace(
                state,
                t_enc=i,
                last_emitted_label=enc_out.label,
                consecutive_defers=0,
                enc_history=enc_hist,
                expert_history=_pushed(state.expert_history, HISTORY_FILL, cfg.history_len),
            )
            return decision, new_state

        # Escalated: consult the expert exactly once.
        try:
            expert_out = expert_fn()
        except ExpertError:
            decision = Decision(
                "emit", enc_out.label, "encoder",
                escalated=True, enc_p=enc_p, theta_enc=theta_enc, expert_failed=True,
            )
            new_state = replace(
                state,
                t_enc=i,
                last_emitted_label=enc_out.label,
                consecutive_defers=0,
                enc_history=enc_hist,
                expert_history=_pushed(state.expert_history, HISTORY_FILL, cfg.history_len),
            )
            return decision, new_state

        expert_p = float(expert_out.confidence)
        expert_hist = _pushed(state.expert_history, expert_p, cfg.history_len)
        theta_vlm: float | None = None
        if cfg.deferral_source == "expert":
            if cfg.strategy == "model":
                defer = self._model_defer(state, expert_hist)
            else:
                defer, theta_vlm = self._threshold_defer(state, expert_p, i)
        else:
            defer = False
        if defer:
            decision = Decision(
                "defer", None, None,
                escalated=True, enc_p=enc_p, expert_p=expert_p,
                theta_enc=theta_enc, theta_vlm=theta_vlm,
            )
            new_state = replace(
                state,
                consecutive_defers=state.consecutive_defers + 1,
                enc_history=enc_hist,
                expert_history=expert_hist,
            )
            return decision, new_state
        decision = Decision(
            "emit", expert_out.label, "expert",
            escalated=True, enc_p=enc_p, expert_p=expert_p,
            theta_enc=theta_enc, theta_vlm=theta_vlm,
        )
        new_state = replace(
            state,
            t_vlm=i,
            last_emitted_label=expert_out.label,
            consecutive_defers=0,
            enc_history=enc_hist,
            expert_history=expert_hist,
        )
        return decision, new_state

    def _step_no_expert(
        self,
        state: RoutingState,
        enc_out: ScorerOutput,
        i: int,
        enc_hist: tuple[float, ...],
    ) -> tuple[Decision, RoutingState]:
        """Expert disabled: emit the encoder label, deferring on its own
        confidence when deferral_source == "encoder"."""
        cfg = self.config
        enc_p = float(enc_out.confidence)
        defer = False
        theta_vlm: float | None = None
        if cfg.deferral_source == "encoder":
            if cfg.strategy == "model":
                defer = self._model_defer(state, enc_hist)
            else:
                defer, theta_vlm = self._threshold_defer(state, enc_p, i)
        expert_hist = _pushed(state.expert_history, HISTORY_FILL, cfg.history_len)
        if defer:
            decision = Decision(
                "defer", None, None,
                escalated=False, enc_p=enc_p, theta_vlm=theta_vlm,
            )
            new_state = replace(
                state,
                consecutive_defers=state.consecutive_defers + 1,
                enc_history=enc_hist,
                expert_history=expert_hist,
            )
            return decision, new_state
        decision = Decision(
            "emit", enc_out.label, "encoder",
            escalated=False, enc_p=enc_p, theta_vlm=theta_vlm,
        )
        new_state = replace(
            state,
            t_enc=i,
            last_emitted_label=enc_out.label,
            consecutive_defers=0,
            enc_history=enc_hist,
            expert_history=expert_hist,
        )
        return decision, new_state


# ---------------------------------------------------------------------------
# Model-based strategy: tiny MLPs over probability histories
# ---------------------------------------------------------------------------


def pad_history(history: Sequence[float], width: int) -> np.ndarray:
    """Left-pad with the neutral 0.5 (or keep the trailing `width` entries)."""
    h = list(history)[-width:]
    if len(h) < width:
        h = [HISTORY_FILL] * (width - len(h)) + h
    return np.asarray(h, dtype=np.float64)


class MetaRouter:
    """2-layer MLP that predicts 'the current prediction is wrong'."""

    def __init__(self, theta: np.ndarray, width: int, hidden: int):
        self.width = width
        self.hidden = hidden
        self.spec = ParamSpec(tuple(mlp_entries("meta", [width, hidden, 1])))
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.spec.size,):
            raise ValueError(f"theta shape {theta.shape} != ({self.spec.size},)")
        self.theta = theta

    def error_probability(self, history: Sequence[float]) -> float:
        x = pad_history(history, self.width)[None, :]
        params = self.spec.unpack(self.theta)
        logit, _ = mlp_forward(params, "meta", x, 2, final_tanh=False)
        return float(1.0 / (1.0 + np.exp(-logit[0, 0])))

    def predict_error(self, history: Sequence[float]) -> bool:
        return self.error_probability(history) > 0.5


def predict_meta(model: MetaRouter, history: Sequence[float]) -> bool:
    """True when the model predicts the underlying prediction is wrong."""
    return model.predict_error(history)


def train_meta_router(
    prob_histories: Sequence[Sequence[float]],
    targets: Sequence[bool],
    *,
    width: int | None = None,
    hidden: int = 16,
    epochs: int = 300,
    learning_rate: float = 5e-2,
    seed: int = 0,
) -> MetaRouter:
    """Fit the error-prediction MLP with full-batch Adam on logistic loss.

    Histories shorter than the width are left-padded with 0.5; targets are
    1 where the underlying prediction was wrong at that timestamp.
    """
    targets_arr = np.asarray(targets, dtype=np.float64)
    if targets_arr.ndim != 1 or targets_arr.size < 2:
        raise ValueError("need at least two target examples")
    uniq = np.unique(targets_arr)
    if uniq.size < 2:
        raise ValueError(
            f"targets are all {bool(uniq[0])}; need both classes to train"
        )
    if width is None:
        width = max(len(h) for h in prob_histories)
    x = np.stack([pad_history(h, width) for h in prob_histories])
    spec = ParamSpec(tuple(mlp_entries("meta", [width, hidden, 1])))
    rng = np.random.default_rng(seed)
    theta = glorot_init(spec, rng)
    optimizer = Adam(lr=learning_rate)
    y = targets_arr[:, None]
    for _ in range(epochs):
        params = spec.unpack(theta)
        logits, cache = mlp_forward(params, "meta", x, 2, final_tanh=False)
        # d/dz of mean logistic loss: (sigmoid(z) - y) / n
        dz = (1.0 / (1.0 + np.exp(-logits)) - y) / x.shape[0]
        grads: dict[str, np.ndarray] = {}
        mlp_backward(params, "meta", cache, dz, grads, final_tanh=False)
        theta = optimizer.step(theta, spec.pack(grads))
    return MetaRouter(theta, width=width, hidden=hidden)
