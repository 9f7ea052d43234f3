"""Action-conditional next-frame prediction and multi-step rollouts.

The network encodes a ``(r, m, n)`` frame stack with three strided
convolutions and a dense head, fuses the state feature with a one-hot action
by a multiplicative interaction, and decodes one frame through a dense layer,
transposed convolutions and a sigmoid.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .envs import Dataset
from .errors import ConfigurationError, InputValidationError, NonFiniteError
from .numerics import (
    DTYPE,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    MultiplicativeFusion,
    OptimConfig,
    ReLU,
    Reshape,
    Sequential,
    Sigmoid,
    conv_output_size,
    load_arrays,
    load_state_dict,
    mse_loss,
    one_hot,
    save_arrays,
    state_dict,
)

log = logging.getLogger(__name__)

# (filters, kernel, stride) per encoder convolution
ENCODER_LAYERS = ((8, 4, 2), (16, 3, 2), (16, 3, 1))
OUTPUT_INIT_SCALE = 0.1


def mirrored_decoder(in_channels, sizes, layers, rng):
    """Transposed convolutions retracing ``sizes`` (encoder input size per conv) in reverse.

    The kernel of each transposed layer is chosen so its output lands exactly
    on the size the matching encoder convolution consumed.
    """
    blocks = []
    channels = [in_channels] + [f for f, _, _ in layers[:-1]]
    for i in reversed(range(len(layers))):
        f, k, s = layers[i]
        target_h, target_w = sizes[i]
        out_h, out_w = sizes[i + 1]
        kh = target_h - (out_h - 1) * s
        kw = target_w - (out_w - 1) * s
        out_ch = channels[i] if i > 0 else 1
        blocks.append(ConvTranspose2d(f, out_ch, (kh, kw), stride=s, rng=rng))
        blocks.append(ReLU() if i > 0 else Sigmoid())
    return blocks


class PredictionNet:
    def __init__(self, frames, height, width, n_actions, hidden=256, joint=256, rng=None,
                 layers=ENCODER_LAYERS):
        self.frames, self.height, self.width, self.n_actions = frames, height, width, n_actions
        self.hidden, self.joint = hidden, joint
        self.layers = tuple(tuple(x) for x in layers)
        rng = rng if rng is not None else np.random.default_rng(0)
        convs, sizes = [], [(height, width)]
        c = frames
        for f, k, s in self.layers:
            h, w = sizes[-1]
            if h < k or w < k:
                raise ConfigurationError(f"frame {height}x{width} too small for encoder layer {(f, k, s)}")
            convs += [Conv2d(c, f, k, stride=s, rng=rng, input_grad=bool(convs)), ReLU()]
            sizes.append((conv_output_size(h, k, s), conv_output_size(w, k, s)))
            c = f
        fh, fw = sizes[-1]
        flat = c * fh * fw
        self.encoder = Sequential(*convs, Flatten(), Dense(flat, hidden, rng=rng), ReLU())
        self.fusion = MultiplicativeFusion(hidden, n_actions, joint, rng=rng)
        self.decoder = Sequential(
            Dense(joint, flat, rng=rng), ReLU(), Reshape(c, fh, fw),
            *mirrored_decoder(c, sizes, self.layers, rng),
        )
        # start the output layer near a constant image so early updates do not
        # saturate the sigmoid before the state pathway carries any signal
        self.output_layer.weight.value *= DTYPE(OUTPUT_INIT_SCALE)
        log.debug("prediction net: %d parameters", self.n_params())

    @property
    def output_layer(self):
        return self.decoder.layers[-2]

    def init_output_bias(self, mean_intensity: float):
        """Set the output bias so an all-zero pre-activation predicts ``mean_intensity``."""
        p = float(np.clip(mean_intensity, 1e-4, 1 - 1e-4))
        self.output_layer.bias.value[...] = np.log(p / (1 - p))

    def params(self):
        return ([("encoder." + n, p) for n, p in self.encoder.params()]
                + [("fusion." + n, p) for n, p in self.fusion.params()]
                + [("decoder." + n, p) for n, p in self.decoder.params()])

    def n_params(self):
        return sum(p.value.size for _, p in self.params())

    def forward(self, stacks, actions):
        """``stacks`` ``(N, r, m, n)`` uint8 or float in [0, 1]; returns ``(N, m, n)`` in (0, 1)."""
        x = to_float(stacks)
        if x.shape[1:] != (self.frames, self.height, self.width):
            raise ConfigurationError(f"state shape {x.shape[1:]} does not match net "
                                     f"{(self.frames, self.height, self.width)}")
        a = one_hot(actions, self.n_actions)
        h = self.fusion.forward(self.encoder.forward(x), a)
        return self.decoder.forward(h)[:, 0]

    def backward(self, dframe):
        """Accumulate parameter gradients; the raw input frames get none."""
        dh = self.decoder.backward(dframe[:, None])
        self.encoder.backward(self.fusion.backward(dh))

    def predict(self, stacks, actions, batch_size=500):
        outs = [self.forward(stacks[i:i + batch_size], actions[i:i + batch_size])
                for i in range(0, len(stacks), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.height, self.width), DTYPE)

    def arch(self):
        return np.array([self.frames, self.height, self.width, self.n_actions, self.hidden, self.joint]
                        + [v for layer in self.layers for v in layer], dtype=np.float32)

    def save(self, path):
        arrays = {"meta.arch": self.arch()}
        arrays.update(state_dict(self.params()))
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path):
        arrays = load_arrays(path)
        meta = [int(v) for v in arrays["meta.arch"]]
        layers = [tuple(meta[i:i + 3]) for i in range(6, len(meta), 3)]
        net = cls(*meta[:4], hidden=meta[4], joint=meta[5], layers=layers)
        load_state_dict(net.params(), arrays)
        return net

    def copy_params(self):
        return [p.value.copy() for _, p in self.params()]

    def set_params(self, values):
        for (_, p), v in zip(self.params(), values):
            p.value[...] = v


def to_float(frames):
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        return frames.astype(DTYPE) * DTYPE(1.0 / 255.0)
    if frames.dtype == np.float64:
        return frames
    return frames.astype(DTYPE, copy=False)


def quantize(frame) -> np.ndarray:
    """Map a float frame in [0, 1] onto the uint8 domain of rendered frames."""
    return np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def predict_frame(net: PredictionNet, state, action: int) -> np.ndarray:
    if not 0 <= int(action) < net.n_actions:
        raise InputValidationError(f"action {action} outside [0, {net.n_actions})")
    return net.forward(np.asarray(state)[None], [int(action)])[0]


def compose_state(state, new_frame) -> np.ndarray:
    """Drop the oldest frame, append ``new_frame`` (quantized to uint8 if float)."""
    state = np.asarray(state)
    frame = np.asarray(new_frame)
    if frame.shape[-2:] != state.shape[-2:]:
        raise ConfigurationError(f"frame shape {frame.shape} does not match state {state.shape}")
    if frame.dtype != np.uint8:
        frame = quantize(frame)
    return np.concatenate([state[..., 1:, :, :], frame[..., None, :, :]], axis=-3)


@dataclass(frozen=True)
class RolloutConfig:
    """Exploration rollouts repeat one action for ``horizon`` steps."""

    horizon: int = 3

    def __post_init__(self):
        if self.horizon < 0:
            raise ConfigurationError("rollout horizon must be >= 0")


def rollout_actions(net, states, action_seqs) -> np.ndarray:
    """Batched rollout following per-row action sequences.

    ``states`` ``(B, r, m, n)``, ``action_seqs`` ``(B, K)``; returns the
    quantized predicted frames ``(B, K, m, n)`` uint8. Each prediction is fed
    back through :func:`compose_state`.
    """
    states = np.asarray(states, dtype=np.uint8)
    action_seqs = np.asarray(action_seqs, dtype=np.int64)
    b, k = action_seqs.shape
    out = np.zeros((b, k, states.shape[-2], states.shape[-1]), dtype=np.uint8)
    cur = states
    for i in range(k):
        frames = quantize(net.predict(cur, action_seqs[:, i]))
        out[:, i] = frames
        cur = compose_state(cur, frames)
    return out


def rollout(net, state, action: int, cfg: RolloutConfig) -> list:
    """``cfg.horizon`` quantized frames from repeating ``action``."""
    if cfg.horizon == 0:
        return []
    seq = np.full((1, cfg.horizon), int(action))
    return list(rollout_actions(net, np.asarray(state)[None], seq)[0])


def rollout_all_actions(net, state, horizon: int) -> np.ndarray:
    """``(l, H, m, n)`` rollouts for every action from one state, batched over actions."""
    n = net.n_actions
    states = np.repeat(np.asarray(state, dtype=np.uint8)[None], n, axis=0)
    seqs = np.repeat(np.arange(n)[:, None], horizon, axis=1)
    return rollout_actions(net, states, seqs)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def evaluate_mse(net, ds: Dataset, batch_size=500) -> float:
    if len(ds) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(ds), batch_size):
        pred = net.forward(ds.states[i:i + batch_size], ds.actions[i:i + batch_size])
        diff = pred.astype(np.float64) - to_float(ds.next_frames[i:i + batch_size])
        total += float(np.sum(diff * diff))
    return total / (len(ds) * ds.m * ds.n)


def train_prediction(net: PredictionNet, train: Dataset, val: Dataset, cfg: OptimConfig, rng,
                     curve_path=None, on_epoch=None, init_bias=True):
    """Minimise one-step MSE with Adam; returns ``[(epoch, train_mse, val_mse), ...]``.

    With ``init_bias`` the output bias first starts at the logit of the mean
    target intensity.

    On a non-finite loss the parameters of the last finite epoch are restored
    and :class:`NonFiniteError` is raised.
    """
    if len(train) == 0:
        raise InputValidationError("prediction training needs a non-empty dataset")
    if init_bias:
        net.init_output_bias(float(np.mean(train.next_frames, dtype=np.float64)) / 255.0)
    opt = cfg.make(net.params())
    curve = []
    good = net.copy_params()
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            idx = np.sort(idx)
            opt.zero_grad()
            pred = net.forward(train.states[idx], train.actions[idx])
            loss, grad = mse_loss(pred, to_float(train.next_frames[idx]))
            if not np.isfinite(loss):
                net.set_params(good)
                raise NonFiniteError(f"prediction loss became non-finite in epoch {epoch}; "
                                     f"restored epoch {epoch - 1} parameters")
            net.backward(grad)
            opt.step()
            total += loss * len(idx)
            count += len(idx)
        row = (epoch, total / count, evaluate_mse(net, val))
        curve.append(row)
        good = net.copy_params()
        log.info("train-pred epoch %d train_mse=%.3e val_mse=%.3e", *row)
        if on_epoch is not None:
            on_epoch(row)
    if curve_path is not None:
        write_curve(curve_path, ("epoch", "train_mse", "val_mse"), curve)
    return curve


def write_curve(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def trajectory_starts(ds: Dataset, length: int) -> tuple[np.ndarray, int]:
    """Indices ``t`` whose next ``length`` records stay in one episode, and how many were skipped.

    A record that ends an episode may only be the last of the window.
    """
    n = len(ds)
    if n == 0 or length <= 0:
        return np.zeros(0, dtype=np.int64), 0
    ends = ds.terminal | ds.truncated
    ids = ds.episode_ids()
    starts = []
    for t in range(n - length + 1):
        if ids[t] == ids[t + length - 1] and not ends[t:t + length - 1].any():
            starts.append(t)
    return np.asarray(starts, dtype=np.int64), n - len(starts)


def eval_multistep_mse(net, ds: Dataset, horizons, max_starts=None, rng=None):
    """Mean MSE of the K-th rollout frame against ground truth, per horizon K.

    Rollouts follow the recorded actions. All horizons are scored on the same
    set of start indices, those with at least ``max(horizons)`` steps left in
    their episode. Returns ``(rows, skipped)`` with rows ``(K, mse, n_starts)``.
    """
    horizons = [int(h) for h in horizons]
    if horizons != sorted(horizons) or not horizons or horizons[0] < 1:
        raise InputValidationError("horizons must be positive and sorted ascending")
    k = horizons[-1]
    starts, skipped = trajectory_starts(ds, k)
    if max_starts is not None and len(starts) > max_starts:
        rng = rng if rng is not None else np.random.default_rng(0)
        starts = np.sort(rng.choice(starts, size=max_starts, replace=False))
    if len(starts) == 0:
        return [(h, float("nan"), 0) for h in horizons], skipped
    window = starts[:, None] + np.arange(k)[None]
    seqs = ds.actions[window]
    truth = ds.next_frames[window]
    preds = np.concatenate([rollout_actions(net, ds.states[starts[i:i + 500]], seqs[i:i + 500])
                            for i in range(0, len(starts), 500)])
    rows = []
    for h in horizons:
        diff = to_float(preds[:, h - 1]).astype(np.float64) - to_float(truth[:, h - 1])
        rows.append((h, float(np.mean(diff * diff)), len(starts)))
    return rows, skipped
