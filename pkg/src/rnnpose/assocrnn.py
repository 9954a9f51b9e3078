"""Recurrent association module: one person's joint heatmaps per iteration.

A stack of ConvLSTM layers reads the front-end features together with the
current per-person prediction (the feedback maps), emits ``J`` heatmaps
through a 1x1 convolution + sigmoid head, and a stop confidence from the
max-pooled hidden states of every layer.
"""
from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Literal

import numpy as np

from . import diffcore as dc
from . import tensorio
from .diffcore import Parameter, Tensor
from .oraclefeat import FeatureBundle

CHECKPOINT_MAGIC = b"RPCK"
CHECKPOINT_VERSION = 1

# train-time unroll limit and inference default
TRAIN_CAP = 6
INFER_CAP = 20
STOP_THRESHOLD = 0.5


@dataclass(frozen=True)
class RnnConfig:
    layers: int = 3
    kernel: int = 3
    hidden_channels: int = 16
    feedback_iterations: int = 3
    joint_count: int = 5
    map_size: int = 32
    stacks: int = 2
    feature_channels: int = 8
    reduce_channels: int = 8

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.feedback_iterations < 0:
            raise ValueError("feedback_iterations must be >= 0")
        for f in ("layers", "hidden_channels", "joint_count", "map_size", "stacks", "feature_channels", "reduce_channels"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")

    @property
    def static_channels(self) -> int:
        """Channels of the per-scene input: all confidence stacks, tags, features."""
        return self.stacks * self.joint_count + self.joint_count + self.feature_channels

    @property
    def passes(self) -> int:
        return max(1, self.feedback_iterations)


@dataclass
class AssociationState:
    hidden: list[Tensor]
    cell: list[Tensor]


@dataclass
class PersonPrediction:
    heatmaps: Tensor  # [J, m, m]
    stop: Tensor  # scalar

    @property
    def stop_confidence(self) -> float:
        return self.stop.item()

    @property
    def maps(self) -> np.ndarray:
        return self.heatmaps.data


def conv_lstm_cell(
    x: Tensor,
    state: tuple[Tensor, Tensor],
    weight: Tensor,
    bias: Tensor,
    extra: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """One ConvLSTM update.

    Gate pre-activations are ``conv(concat(x, h), weight) + bias`` plus an
    optional precomputed ``extra`` term of the same shape, split along
    channels as input, forget, output and candidate gates.
    """
    h, c = state
    hidden = h.shape[0]
    if weight.shape[0] != 4 * hidden or c.shape != h.shape:
        raise dc.ContractError(f"conv_lstm_cell: weight {weight.shape} vs hidden {h.shape}, cell {c.shape}")
    gates = dc.conv2d(dc.concat_channels([x, h]), weight, bias)
    if extra is not None:
        gates = gates + extra
    i = dc.sigmoid(dc.slice_channels(gates, 0, hidden))
    f = dc.sigmoid(dc.slice_channels(gates, hidden, 2 * hidden))
    o = dc.sigmoid(dc.slice_channels(gates, 2 * hidden, 3 * hidden))
    g = dc.tanh(dc.slice_channels(gates, 3 * hidden, 4 * hidden))
    c_new = f * c + i * g
    h_new = o * dc.tanh(c_new)
    return h_new, c_new


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = np.sqrt(1.0 / fan_in)
    return rng.uniform(-a, a, shape)


class AssociationRNN:
    def __init__(self, config: RnnConfig = RnnConfig(), seed: int = 0, head_bias: float = -2.0):
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        k, c, r, jc = cfg.kernel, cfg.hidden_channels, cfg.reduce_channels, cfg.joint_count
        params: dict[str, Parameter] = {}

        def add(name, data):
            params[name] = Parameter(data, name)

        # The first layer's kernel over concat(static, feedback, h) is stored
        # as two blocks so the static block is convolved once per scene.
        fan0 = (cfg.static_channels + jc + c) * k * k
        add("cell0.w_static", _uniform(rng, (4 * c, cfg.static_channels, k, k), fan0))
        add("cell0.w", _uniform(rng, (4 * c, jc + c, k, k), fan0))
        add("cell0.b", self._gate_bias(c))
        for layer in range(1, cfg.layers):
            add(f"reduce{layer}.w", _uniform(rng, (r, c, 1, 1), c))
            add(f"reduce{layer}.b", np.zeros(r))
            add(f"cell{layer}.w", _uniform(rng, (4 * c, r + c, k, k), (r + c) * k * k))
            add(f"cell{layer}.b", self._gate_bias(c))
        add("head.w", _uniform(rng, (jc, c, 1, 1), c))
        add("head.b", np.full(jc, head_bias))
        add("stop.w", _uniform(rng, (1, cfg.layers * c), cfg.layers * c))
        add("stop.b", np.zeros(1))
        self.params = params

    @staticmethod
    def _gate_bias(c: int) -> np.ndarray:
        b = np.zeros(4 * c)
        b[c:2 * c] = 1.0  # forget gate
        return b

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    # -- forward -----------------------------------------------------------
    def initial_state(self) -> AssociationState:
        cfg = self.config
        shape = (cfg.hidden_channels, cfg.map_size, cfg.map_size)
        return AssociationState([Tensor(np.zeros(shape)) for _ in range(cfg.layers)],
                                [Tensor(np.zeros(shape)) for _ in range(cfg.layers)])

    def static_input(self, features: FeatureBundle) -> np.ndarray:
        cfg = self.config
        expected = (cfg.stacks, cfg.joint_count, cfg.map_size, cfg.map_size)
        if features.confidence.shape != expected or features.feature_channels != cfg.feature_channels:
            raise dc.ContractError(
                f"features {features.confidence.shape}/{features.feature_channels} do not match config {expected}/{cfg.feature_channels}"
            )
        m = cfg.map_size
        return np.concatenate([features.confidence.reshape(-1, m, m), features.embeddings, features.intermediate])

    def static_gates(self, features: FeatureBundle) -> Tensor:
        return dc.conv2d(Tensor(self.static_input(features)), self.params["cell0.w_static"])

    def _pass(self, static: Tensor, feedback: Tensor, state: AssociationState) -> tuple[Tensor, AssociationState]:
        p = self.params
        hidden, cell = [], []
        h, c = conv_lstm_cell(feedback, (state.hidden[0], state.cell[0]), p["cell0.w"], p["cell0.b"], extra=static)
        hidden.append(h)
        cell.append(c)
        for layer in range(1, self.config.layers):
            below = dc.conv2d(hidden[-1], p[f"reduce{layer}.w"], p[f"reduce{layer}.b"])
            h, c = conv_lstm_cell(below, (state.hidden[layer], state.cell[layer]), p[f"cell{layer}.w"], p[f"cell{layer}.b"])
            hidden.append(h)
            cell.append(c)
        out = dc.sigmoid(dc.conv2d(hidden[-1], p["head.w"], p["head.b"]))
        return out, AssociationState(hidden, cell)

    def person_step(
        self,
        features: FeatureBundle,
        state: AssociationState,
        prev_feedback: Tensor | np.ndarray,
        static: Tensor | None = None,
    ) -> tuple[PersonPrediction, AssociationState]:
        """Predict one person; hidden state persists across the feedback passes.

        With ``feedback_iterations == 0`` a single pass runs with the feedback
        channels held at zero.
        """
        if static is None:
            static = self.static_gates(features)
        feedback = dc.as_tensor(prev_feedback)
        if self.config.feedback_iterations == 0:
            feedback = Tensor(np.zeros(feedback.shape))
        heat = feedback
        for _ in range(self.config.passes):
            heat, state = self._pass(static, feedback, state)
            if self.config.feedback_iterations > 0:
                feedback = heat
        pooled = _pool_concat(state.hidden)
        stop = dc.sigmoid(dc.dense(pooled, self.params["stop.w"], self.params["stop.b"]))
        return PersonPrediction(heat, dc.reshape(stop, ())), state

    def unroll(
        self,
        features: FeatureBundle,
        mode: Literal["train", "infer"] = "infer",
        n_true: int | None = None,
        cap: int | None = None,
        rng: np.random.Generator | None = None,
    ) -> list[PersonPrediction]:
        """Run the person loop.

        ``train``: exactly ``min(n_true + 1, cap or 6)`` steps regardless of the
        stop head, first feedback maps uniform on [0, 0.1].  ``infer``: steps
        until the stop confidence drops below 0.5 or ``cap`` (default 20)
        predictions are kept; the halting step is not returned.
        """
        cfg = self.config
        shape = (cfg.joint_count, cfg.map_size, cfg.map_size)
        static = self.static_gates(features)
        state = self.initial_state()
        preds: list[PersonPrediction] = []
        if mode == "train":
            if n_true is None or n_true < 0:
                raise ValueError("train mode needs n_true >= 0")
            rng = rng if rng is not None else np.random.default_rng(0)
            feedback = Tensor(rng.uniform(0.0, 0.1, shape))
            for _ in range(min(n_true + 1, cap or TRAIN_CAP)):
                pred, state = self.person_step(features, state, feedback, static)
                preds.append(pred)
                feedback = pred.heatmaps
            return preds
        if mode != "infer":
            raise ValueError(f"unknown mode {mode!r}")
        cap = INFER_CAP if cap is None else cap
        if cap < 1:
            raise ValueError("infer cap must be >= 1")
        feedback = Tensor(np.zeros(shape))
        while len(preds) < cap:
            pred, state = self.person_step(features, state, feedback, static)
            if pred.stop_confidence < STOP_THRESHOLD:
                break
            preds.append(pred)
            feedback = pred.heatmaps
        return preds

    def infer(self, features: FeatureBundle, cap: int | None = None) -> list[PersonPrediction]:
        with dc.no_grad():
            return self.unroll(features, "infer", cap=cap)

    # -- persistence -------------------------------------------------------
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        tensorio.write_header(buf, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        values = [getattr(self.config, f.name) for f in fields(RnnConfig)]
        buf.write(struct.pack("<I", len(values)))
        buf.write(struct.pack(f"<{len(values)}I", *values))
        tensorio.write_records(buf, {name: p.data for name, p in self.params.items()})
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "AssociationRNN":
        src = io.BytesIO(data)
        tensorio.read_header(src, CHECKPOINT_MAGIC, (CHECKPOINT_VERSION,))
        raw = src.read(4)
        if len(raw) != 4:
            raise tensorio.FormatError("truncated config block")
        (count,) = struct.unpack("<I", raw)
        names = [f.name for f in fields(RnnConfig)]
        if count != len(names):
            raise tensorio.FormatError(f"config block has {count} fields, expected {len(names)}")
        block = src.read(4 * count)
        if len(block) != 4 * count:
            raise tensorio.FormatError("truncated config block")
        config = RnnConfig(**dict(zip(names, struct.unpack(f"<{count}I", block))))
        model = cls(config)
        records = tensorio.read_records(src)
        if records.keys() != model.params.keys():
            raise tensorio.FormatError(f"parameter names differ: {sorted(set(records) ^ set(model.params))}")
        for name, arr in records.items():
            if arr.shape != model.params[name].shape:
                raise tensorio.FormatError(f"{name}: shape {arr.shape} != {model.params[name].shape}")
            model.params[name].data = arr
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "AssociationRNN":
        return cls.from_bytes(Path(path).read_bytes())

    def config_dict(self) -> dict:
        return asdict(self.config)


def _pool_concat(hidden: list[Tensor]) -> Tensor:
    pooled = [dc.reshape(dc.global_max_pool(h), (h.shape[0], 1, 1)) for h in hidden]
    return dc.reshape(dc.concat_channels(pooled), (sum(h.shape[0] for h in hidden),))
