"""Full network assembly.

Pipeline: stem convs -> masked residual stage A -> reduction A -> masked
residual stage B -> reduction B -> unmasked residual stage C -> spatial
average pooling -> dropout -> LSTM over the frame axis -> fully-connected
logits. Landmark weight masks are injected at the stage-A and stage-B
resolutions only; the stage-C grid is too small to carry one.

Builder, symbolic shape trace, and forward all share the same layer
objects, so the printed trace is the executed one.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ContractError, DataError, DimensionError
from .landmarks import LandmarkFrame, MaskCache
from .layers import (ConvUnit, LSTMParams, LandmarkResidualBlockParams,
                     ReductionBlockParams, dropout, fully_connected,
                     init_conv_kernel, init_fc_weight, init_lstm_params,
                     landmark_residual_block, lstm_sequence, reduction_block,
                     reduction_out_shape)
from .tensor import Tensor


class ModelParams:
    """The learnable tensors, keyed by stable hierarchical names.

    The key set is a pure function of the ModelConfig, which is what makes
    checkpoints portable across runs.
    """

    def __init__(self, named: "OrderedDict[str, Tensor]"):
        self._named = named

    def names(self) -> list[str]:
        return list(self._named)

    def items(self):
        return self._named.items()

    def values(self):
        return self._named.values()

    def __getitem__(self, name: str) -> Tensor:
        return self._named[name]

    def __contains__(self, name: str) -> bool:
        return name in self._named

    def __len__(self) -> int:
        return len(self._named)

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._named)

    def count_scalars(self) -> int:
        return sum(t.size for t in self._named.values())

    def zero_grads(self) -> None:
        for t in self._named.values():
            t.zero_grad()


def _block_kernel_template(kind: str, n: int) -> list[tuple[int, int, int]]:
    """Kernel extents for an n-conv branch of a block of the given kind.

    3x3 spatial kernels get temporal extent 3; 1x1 and the factorized
    row/column kernels stay temporally flat.
    """
    if kind == "a":
        return [(1, 1, 1)] + [(3, 3, 3)] * (n - 1)
    factors = {"b": [(1, 1, 7), (1, 7, 1)], "c": [(1, 1, 3), (1, 3, 1)]}[kind]
    return [(1, 1, 1)] + [factors[j % 2] for j in range(n - 1)]


class Model:
    """A built network: config, parameters, and the layer graph."""

    def __init__(self, config: ModelConfig, seed=0):
        config.validate()
        self.config = config
        self.mask_cache = MaskCache()
        self._rng = np.random.Generator(np.random.PCG64(seed)) \
            if not isinstance(seed, np.random.Generator) else seed
        self._named: "OrderedDict[str, Tensor]" = OrderedDict()
        self._trace: list[tuple[str, tuple]] = []
        self._build()
        self.params = ModelParams(self._named)

    # -- construction ----------------------------------------------------

    def _conv(self, prefix: str, in_ch: int, out_ch: int, kernel,
              stride=(1, 1, 1), padding="same", activation="relu") -> ConvUnit:
        dtype = self.config.np_dtype
        k = Tensor(init_conv_kernel(self._rng, (*kernel, in_ch, out_ch), dtype),
                   requires_grad=True)
        b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self._named[f"{prefix}.kernel"] = k
        self._named[f"{prefix}.bias"] = b
        return ConvUnit(k, b, stride=stride, padding=padding, activation=activation)

    def _residual_stage(self, stage: str, kind: str, in_ch: int,
                        branches_cfg, repeats: int) -> list[LandmarkResidualBlockParams]:
        blocks = []
        for r in range(repeats):
            prefix = f"{stage}.block{r}"
            branches = []
            for bi, widths in enumerate(branches_cfg):
                kernels = _block_kernel_template(kind, len(widths))
                chain, cin = [], in_ch
                for ci, (w, kk) in enumerate(zip(widths, kernels)):
                    chain.append(self._conv(f"{prefix}.branch{bi}.conv{ci}",
                                            cin, w, kk))
                    cin = w
                branches.append(chain)
            concat_ch = sum(widths[-1] for widths in branches_cfg)
            project = self._conv(f"{prefix}.project", concat_ch, in_ch,
                                 (1, 1, 1), activation="linear")
            blocks.append(LandmarkResidualBlockParams(
                branches=branches, project=project, activation="relu",
                residual_scale=self.config.residual_scale))
        return blocks

    def _reduction(self, stage: str, in_ch: int, branches_cfg) -> ReductionBlockParams:
        conv_branches = []
        for bi, widths in enumerate(branches_cfg):
            chain, cin = [], in_ch
            for ci, w in enumerate(widths):
                if ci == len(widths) - 1:
                    kk, st, pad = (1, 3, 3), (1, 2, 2), "valid"
                elif ci == 0:
                    kk, st, pad = (1, 1, 1), (1, 1, 1), "same"
                else:
                    kk, st, pad = (3, 3, 3), (1, 1, 1), "same"
                chain.append(self._conv(f"{stage}.branch{bi}.conv{ci}",
                                        cin, w, kk, stride=st, padding=pad))
                cin = w
            conv_branches.append(chain)
        return ReductionBlockParams(conv_branches=conv_branches)

    def _build(self) -> None:
        cfg = self.config
        shape = (cfg.frames, cfg.height, cfg.width, cfg.channels)
        self._trace.append(("input", shape))

        self.stem: list[ConvUnit] = []
        cin = cfg.channels
        for i, (w, s) in enumerate(zip(cfg.stem_widths, cfg.stem_strides)):
            unit = self._conv(f"stem.conv{i}", cin, w, (3, 3, 3),
                              stride=(1, s, s), padding="same")
            self.stem.append(unit)
            shape = unit.out_shape(shape)
            self._trace.append((f"stem.conv{i}", shape))
            cin = w

        self.stage_a = self._residual_stage("block_a", "a", cin,
                                            cfg.block_a_branches, cfg.block_a_repeats)
        self._trace.append(("block_a", shape))
        self.mask_shape_a = shape

        self.red_a = self._reduction("reduction_a", cin, cfg.reduction_a_branches)
        try:
            shape = reduction_out_shape(shape, self.red_a)
        except DimensionError as exc:
            raise ConfigError(f"stage reduction_a: {exc}") from exc
        self._trace.append(("reduction_a", shape))
        cin = shape[3]

        self.stage_b = self._residual_stage("block_b", "b", cin,
                                            cfg.block_b_branches, cfg.block_b_repeats)
        self._trace.append(("block_b", shape))
        self.mask_shape_b = shape

        self.red_b = self._reduction("reduction_b", cin, cfg.reduction_b_branches)
        try:
            shape = reduction_out_shape(shape, self.red_b)
        except DimensionError as exc:
            raise ConfigError(f"stage reduction_b: {exc}") from exc
        self._trace.append(("reduction_b", shape))
        cin = shape[3]

        self.stage_c = self._residual_stage("block_c", "c", cin,
                                            cfg.block_c_branches, cfg.block_c_repeats)
        self._trace.append(("block_c", shape))

        t, h, w, c = shape
        if cfg.lstm_input_mode == "pooled":
            self.pool_window = (h, w)
        else:
            self.pool_window = (max(1, min(cfg.avgpool_window, h)),
                                max(1, min(cfg.avgpool_window, w)))
        ph, pw = self.pool_window
        shape = (t, (h - ph) // ph + 1, (w - pw) // pw + 1, c)
        self._trace.append(("avgpool", shape))

        self.lstm_input_size = shape[1] * shape[2] * shape[3]
        self._trace.append(("lstm_input", (t, self.lstm_input_size)))

        self.lstm = init_lstm_params(self._rng, self.lstm_input_size,
                                     cfg.lstm_hidden, dtype=cfg.np_dtype)
        for name, tn in self.lstm.named_tensors("lstm"):
            self._named[name] = tn
        self._trace.append(("lstm", (cfg.lstm_hidden,)))

        self.fc_w = Tensor(init_fc_weight(self._rng, (cfg.lstm_hidden, cfg.num_classes),
                                          cfg.np_dtype), requires_grad=True)
        self.fc_b = Tensor(np.zeros(cfg.num_classes, dtype=cfg.np_dtype),
                           requires_grad=True)
        self._named["head.fc.weight"] = self.fc_w
        self._named["head.fc.bias"] = self.fc_b
        self._trace.append(("logits", (cfg.num_classes,)))

    # -- shape contract ----------------------------------------------------

    def shape_trace(self) -> list[tuple[str, tuple]]:
        """Per-stage output extents (without the batch axis)."""
        return list(self._trace)

    def stage_shape(self, name: str) -> tuple:
        for stage, shape in self._trace:
            if stage == name:
                return shape
        raise KeyError(name)

    # -- execution ---------------------------------------------------------

    def _mask_batch(self, landmarks, feature_shape: tuple) -> Tensor | None:
        if self.config.mask_mode == "ones":
            return None
        cfg = self.config
        slabs = [self.mask_cache.get(frames, feature_shape, cfg.mask_window,
                                     cfg.mask_slope, cfg.mask_background,
                                     dtype=cfg.np_dtype)
                 for frames in landmarks]
        return Tensor(np.stack(slabs, axis=0))

    def _check_inputs(self, data: np.ndarray, landmarks) -> None:
        cfg = self.config
        expected = (cfg.frames, cfg.height, cfg.width, cfg.channels)
        if data.ndim != 5 or data.shape[1:] != expected:
            raise DimensionError(
                f"clips must be [batch, {expected[0]}, {expected[1]}, "
                f"{expected[2]}, {expected[3]}], got {data.shape}")
        if self.config.mask_mode == "ones":
            return
        if landmarks is None or len(landmarks) != data.shape[0]:
            got = 0 if landmarks is None else len(landmarks)
            raise DataError(
                f"need landmark frames for all {data.shape[0]} samples, got {got}")
        for i, frames in enumerate(landmarks):
            if len(frames) != cfg.frames:
                raise DataError(
                    f"sample {i}: expected {cfg.frames} landmark frames, "
                    f"got {len(frames)}")

    def forward(self, clips, landmarks=None, mode: str = "eval",
                rng: np.random.Generator | None = None) -> Tensor:
        """Run the network; returns logits [batch, num_classes].

        ``landmarks`` is one sequence of LandmarkFrame per sample (ignored
        when the config's mask mode is 'ones'). Train mode applies dropout
        and therefore needs ``rng``.
        """
        if mode not in ("train", "eval"):
            raise ContractError(f"unknown mode {mode!r}")
        data = clips.data if isinstance(clips, Tensor) else np.asarray(clips)
        self._check_inputs(data, landmarks)
        cfg = self.config
        x = Tensor(np.ascontiguousarray(data, dtype=cfg.np_dtype))

        for unit in self.stem:
            x = unit(x)
        mask_a = self._mask_batch(landmarks, self.mask_shape_a)
        for block in self.stage_a:
            x = landmark_residual_block(x, mask_a, block)
        x = reduction_block(x, self.red_a)
        mask_b = self._mask_batch(landmarks, self.mask_shape_b)
        for block in self.stage_b:
            x = landmark_residual_block(x, mask_b, block)
        x = reduction_block(x, self.red_b)
        for block in self.stage_c:
            x = landmark_residual_block(x, None, block)

        ph, pw = self.pool_window
        x = T.pool3d(x, (1, ph, pw), stride=(1, ph, pw), mode="average",
                     padding="valid")
        x = T.reshape(x, (data.shape[0], cfg.frames, self.lstm_input_size))
        x = dropout(x, cfg.dropout_rate, mode=mode, rng=rng)
        h = lstm_sequence(x, self.lstm)
        return fully_connected(h, self.fc_w, self.fc_b)

    def predict(self, clips, landmarks=None) -> tuple[np.ndarray, np.ndarray]:
        """Class ids (ties to the lowest id) and per-class probabilities."""
        with T.no_grad():
            logits = self.forward(clips, landmarks, mode="eval")
        probs = T.softmax(logits.data)
        return probs.argmax(axis=1), probs


def build(config: ModelConfig, seed=0) -> Model:
    """Initialize a model; identical seeds give bitwise-identical parameters."""
    return Model(config, seed=seed)


def format_shape_trace(model: Model) -> str:
    lines = [f"{'stage':<16} output extents"]
    for name, shape in model.shape_trace():
        lines.append(f"{name:<16} {'x'.join(str(s) for s in shape)}")
    return "\n".join(lines)
