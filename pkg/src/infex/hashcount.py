"""Autoencoder features, sign-projection hashing and visit counting.

A frame is counted through ``z = phi(s)``, ``c = sgn(A z)``, ``psi = H[c]``:
``phi`` is the autoencoder's encoder output, ``A`` a fixed Gaussian
projection and ``H`` a table of visit counts keyed by the binary code.
Training runs in two phases: reconstruction only on seen frames, then
reconstruction of both members of (seen, predicted) pairs plus a feature
matching term that pulls their codes together.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter

import numpy as np

from .errors import ConfigurationError, InputValidationError, NonFiniteError
from .numerics import (
    DTYPE,
    Conv2d,
    ConvTranspose2d,
    Flatten,
    MaxPool2,
    OptimConfig,
    ReLU,
    Reshape,
    Sequential,
    Sigmoid,
    bce_loss,
    conv_output_size,
    load_arrays,
    load_state_dict,
    rowwise_l2,
    save_arrays,
    state_dict,
)
from .prediction import to_float, write_curve

log = logging.getLogger(__name__)

# (filters, kernel) per conv -> ReLU -> maxpool2 block
AE_LAYERS = ((8, 3), (16, 3))
DEFAULT_BITS = 64


def encoder_blocks(in_channels, height, width, layers, rng):
    """Conv/ReLU/maxpool2 blocks; returns ``(layers, sizes, channels)`` with the size before each block."""
    blocks, sizes, c = [], [(height, width)], in_channels
    for f, k in layers:
        h, w = sizes[-1]
        ch, cw = conv_output_size(h, k, 1), conv_output_size(w, k, 1)
        if ch < 2 or cw < 2 or ch % 2 or cw % 2:
            raise ConfigurationError(f"encoder block {(f, k)} on {h}x{w} gives odd or empty map {ch}x{cw}")
        blocks += [Conv2d(c, f, k, rng=rng, input_grad=bool(blocks)), ReLU(), MaxPool2()]
        sizes.append((ch // 2, cw // 2))
        c = f
    return blocks, sizes, c


class Autoencoder:
    def __init__(self, height, width, rng=None, layers=AE_LAYERS):
        self.height, self.width = height, width
        self.layers = tuple(tuple(x) for x in layers)
        rng = rng if rng is not None else np.random.default_rng(0)
        blocks, sizes, c = encoder_blocks(1, height, width, self.layers, rng)
        fh, fw = sizes[-1]
        self.feature_dim = c * fh * fw
        self.encoder = Sequential(*blocks, Flatten())
        dec = [Reshape(c, fh, fw)]
        channels = [1] + [f for f, _ in self.layers]
        for i in reversed(range(len(self.layers))):
            (th, tw), (oh, ow) = sizes[i], sizes[i + 1]
            # one stride-2 transposed conv undoes conv + pool
            kh, kw = th - (oh - 1) * 2, tw - (ow - 1) * 2
            dec.append(ConvTranspose2d(channels[i + 1], channels[i], (kh, kw), stride=2, rng=rng))
            dec.append(ReLU() if i > 0 else Sigmoid())
        self.decoder = Sequential(*dec)
        log.debug("autoencoder: d=%d, %d parameters", self.feature_dim, self.n_params())

    def params(self):
        return ([("encoder." + n, p) for n, p in self.encoder.params()]
                + [("decoder." + n, p) for n, p in self.decoder.params()])

    def n_params(self):
        return sum(p.value.size for _, p in self.params())

    def _input(self, frames):
        x = to_float(frames)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.height, self.width):
            raise InputValidationError(f"frame shape {x.shape[1:]} does not match autoencoder "
                                       f"{(self.height, self.width)}")
        return x[:, None]

    def encode(self, frames) -> np.ndarray:
        """Features ``(N, d)``; non-negative since they follow a ReLU and a max pool."""
        return self.encoder.forward(self._input(frames))

    def forward(self, frames):
        """Returns ``(z, reconstruction)`` with reconstruction ``(N, m, n)`` in (0, 1)."""
        z = self.encode(frames)
        return z, self.decoder.forward(z)[:, 0]

    def backward(self, d_recon, d_z=None):
        g = self.decoder.backward(d_recon[:, None])
        if d_z is not None:
            g = g + d_z
        self.encoder.backward(g)

    def features_batched(self, frames, batch_size=1000):
        out = [self.encode(frames[i:i + batch_size]) for i in range(0, len(frames), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim), DTYPE)

    def reconstruct(self, frames, batch_size=1000):
        out = [self.forward(frames[i:i + batch_size])[1] for i in range(0, len(frames), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.height, self.width), DTYPE)

    def copy_params(self):
        return [p.value.copy() for _, p in self.params()]

    def set_params(self, values):
        for (_, p), v in zip(self.params(), values):
            p.value[...] = v


def features(ae: Autoencoder, frame) -> np.ndarray:
    """Feature vector of a single ``(m, n)`` frame."""
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise InputValidationError(f"expected one (m, n) frame, got shape {frame.shape}")
    return ae.encode(frame)[0]


class Projection:
    """Fixed ``p x d`` matrix with i.i.d. standard Gaussian entries."""

    def __init__(self, bits, dim, seed=None, matrix=None):
        if matrix is None:
            matrix = np.random.default_rng(seed).standard_normal((bits, dim))
        self.matrix = np.array(matrix, dtype=DTYPE)
        self.matrix.setflags(write=False)
        self.seed = seed

    @property
    def bits(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]

    def hash(self, z) -> np.ndarray:
        """Bits of ``sgn(A z)`` for one vector or a batch; ``sgn(0)`` counts as positive."""
        z = np.asarray(z, dtype=DTYPE)
        if z.shape[-1] != self.dim:
            raise InputValidationError(f"feature length {z.shape[-1]} does not match projection dim {self.dim}")
        return (z @ self.matrix.T) >= 0

    def __eq__(self, other):
        return isinstance(other, Projection) and np.array_equal(self.matrix, other.matrix)

    __hash__ = None


def hash_code(proj: Projection, z) -> np.ndarray:
    return proj.hash(z)


def code_key(code) -> bytes:
    """Hashable, compact form of a bit vector."""
    if isinstance(code, bytes):
        return code
    return np.packbits(np.asarray(code, dtype=bool)).tobytes()


def code_hex(code, bits=None) -> str:
    return code_key(code).hex()


def code_loss(c1, c2) -> int:
    """Hamming distance between two codes of equal length."""
    c1 = np.asarray(c1, dtype=bool)
    c2 = np.asarray(c2, dtype=bool)
    if c1.shape != c2.shape:
        raise InputValidationError(f"code lengths differ: {c1.shape} vs {c2.shape}")
    return int(np.count_nonzero(c1 != c2))


def code_losses(codes_a, codes_b) -> np.ndarray:
    return np.count_nonzero(np.asarray(codes_a) != np.asarray(codes_b), axis=-1)


class CountTable:
    """Visit counts keyed by hash code; queries never mutate."""

    def __init__(self):
        self._counts = Counter()
        self.total = 0

    def insert(self, code) -> int:
        key = code_key(code)
        self._counts[key] += 1
        self.total += 1
        return self._counts[key]

    def query(self, code) -> int:
        return self._counts.get(code_key(code), 0)

    def __len__(self):
        return len(self._counts)

    def items(self):
        return self._counts.items()

    def sum(self):
        return sum(self._counts.values())

    def dump_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("code", "count"))
            for key, count in sorted(self._counts.items()):
                w.writerow((key.hex(), count))

    @classmethod
    def load_csv(cls, path):
        table = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                n = int(row["count"])
                table._counts[bytes.fromhex(row["code"])] = n
                table.total += n
        return table


def count_insert(table: CountTable, code) -> int:
    return table.insert(code)


def count_query(table: CountTable, code) -> int:
    return table.query(code)


class FrameHasher:
    """Frozen autoencoder + projection, with a memo of codes per distinct frame."""

    def __init__(self, ae: Autoencoder, proj: Projection):
        if proj.dim != ae.feature_dim:
            raise ConfigurationError(f"projection dim {proj.dim} != autoencoder feature dim {ae.feature_dim}")
        self.ae, self.proj = ae, proj
        self._memo = {}

    def codes(self, frames) -> list:
        """Code keys for a batch of uint8 frames."""
        frames = np.asarray(frames, dtype=np.uint8)
        keys = [f.tobytes() for f in frames]
        missing = [i for i, k in enumerate(keys) if k not in self._memo]
        if missing:
            z = self.ae.encode(frames[missing])
            for i, bits in zip(missing, self.proj.hash(z)):
                self._memo[keys[i]] = code_key(bits)
        return [self._memo[k] for k in keys]

    def code(self, frame) -> bytes:
        return self.codes(np.asarray(frame)[None])[0]


def count_state(table: CountTable, proj: Projection, ae: Autoencoder, frame) -> int:
    """Count of the frame's code; a pure query."""
    return table.query(proj.hash(features(ae, np.asarray(frame))))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield np.sort(order[i:i + batch_size])


def reconstruction_bce(ae, frames, batch_size=1000) -> float:
    if len(frames) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(frames), batch_size):
        chunk = frames[i:i + batch_size]
        total += bce_loss(ae.forward(chunk)[1], to_float(chunk))[0] * len(chunk)
    return total / len(frames)


def reconstruction_mse(ae, frames, batch_size=1000) -> float:
    if len(frames) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(frames), batch_size):
        chunk = frames[i:i + batch_size]
        diff = ae.forward(chunk)[1].astype(np.float64) - to_float(chunk)
        total += float(np.sum(diff * diff))
    return total / (len(frames) * frames.shape[1] * frames.shape[2])


def converged(losses, window=3, tol=0.01) -> bool:
    """True once validation loss improved by less than ``tol`` (relative) over ``window`` epochs."""
    if len(losses) <= window:
        return False
    ref = losses[-1 - window]
    return ref - losses[-1] < tol * abs(ref)


def train_phase1(ae: Autoencoder, frames, val_frames, cfg: OptimConfig, rng, curve_path=None,
                 on_epoch=None):
    """Reconstruction-only training on seen frames until validation loss stops improving.

    Runs at most ``cfg.epochs`` epochs. Returns rows ``(epoch, train_bce, val_bce, val_mse)``.
    """
    if len(frames) == 0:
        raise InputValidationError("phase-1 training needs frames")
    opt = cfg.make(ae.params())
    curve, vals = [], []
    good = ae.copy_params()
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(len(frames), cfg.batch_size, rng):
            opt.zero_grad()
            batch = frames[idx]
            _, recon = ae.forward(batch)
            loss, grad = bce_loss(recon, to_float(batch))
            if not np.isfinite(loss):
                ae.set_params(good)
                raise NonFiniteError(f"phase-1 loss became non-finite in epoch {epoch}")
            ae.backward(grad)
            opt.step()
            total += loss * len(idx)
        val_bce = reconstruction_bce(ae, val_frames)
        row = (epoch, total / len(frames), val_bce, reconstruction_mse(ae, val_frames))
        curve.append(row)
        vals.append(val_bce)
        good = ae.copy_params()
        log.info("phase1 epoch %d train_bce=%.4e val_bce=%.4e val_mse=%.3e", *row)
        if on_epoch is not None:
            on_epoch(row)
        if converged(vals):
            break
    if curve_path is not None:
        write_curve(curve_path, ("epoch", "train_bce", "val_bce", "val_mse"), curve)
    return curve


def pair_loss(ae: Autoencoder, seen, pred, lam):
    """Composite loss over a batch of pairs; fills gradients and returns its parts.

    Per pair: ``bce(seen) + bce(pred) + lam * ||phi(seen) - phi(pred)||``,
    averaged over the batch. Both members go through the network as one batch.
    """
    n = len(seen)
    frames = np.concatenate([seen, pred])
    z, recon = ae.forward(frames)
    target = to_float(frames)
    rec_s, g_s = bce_loss(recon[:n], target[:n])
    rec_p, g_p = bce_loss(recon[n:], target[n:])
    dist, g_z = rowwise_l2(z[:n], z[n:])
    mat = float(np.mean(dist))
    d_z = np.concatenate([lam * g_z, -lam * g_z])
    ae.backward(np.concatenate([g_s, g_p]), d_z)
    return rec_s + rec_p + lam * mat, rec_s, rec_p, mat


def evaluate_pairs(ae: Autoencoder, proj: Projection, seen, pred, batch_size=1000):
    """Code-loss statistics and reconstruction MSE for (seen, predicted) pairs."""
    c_seen = proj.hash(ae.features_batched(seen, batch_size))
    c_pred = proj.hash(ae.features_batched(pred, batch_size))
    losses = code_losses(c_seen, c_pred)
    return {
        "pairs": int(len(losses)),
        "mean_code_loss": float(np.mean(losses)) if len(losses) else float("nan"),
        "median_code_loss": float(np.median(losses)) if len(losses) else float("nan"),
        "fraction_zero": float(np.mean(losses == 0)) if len(losses) else float("nan"),
        "count_agreement": float(np.mean(losses == 0)) if len(losses) else float("nan"),
        "rec_mse_seen": reconstruction_mse(ae, seen, batch_size),
        "rec_mse_pred": reconstruction_mse(ae, pred, batch_size),
    }


def train_phase2(ae: Autoencoder, seen, pred, val_seen, val_pred, lam, cfg: OptimConfig, rng,
                 proj: Projection, curve_path=None, on_epoch=None):
    """Joint reconstruction + matching training on (seen, predicted) pairs.

    Returns rows ``(epoch, mean_code_loss, rec_mse_seen, rec_mse_pred)`` measured
    on the validation pairs under ``proj``.
    """
    if len(seen) != len(pred) or len(seen) == 0:
        raise InputValidationError("phase-2 training needs equally many, non-zero seen and predicted frames")
    opt = cfg.make(ae.params())
    curve = []
    good = ae.copy_params()
    for epoch in range(1, cfg.epochs + 1):
        for idx in _batches(len(seen), cfg.batch_size, rng):
            opt.zero_grad()
            loss, *_ = pair_loss(ae, seen[idx], pred[idx], lam)
            if not np.isfinite(loss):
                ae.set_params(good)
                raise NonFiniteError(f"phase-2 loss became non-finite in epoch {epoch}")
            opt.step()
        stats = evaluate_pairs(ae, proj, val_seen, val_pred)
        row = (epoch, stats["mean_code_loss"], stats["rec_mse_seen"], stats["rec_mse_pred"])
        curve.append(row)
        good = ae.copy_params()
        log.info("phase2 epoch %d code_loss=%.3f rec_seen=%.3e rec_pred=%.3e", *row)
        if on_epoch is not None:
            on_epoch(row)
    if curve_path is not None:
        write_curve(curve_path, ("epoch", "mean_code_loss", "rec_mse_seen", "rec_mse_pred"), curve)
    return curve


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_autoencoder(path, ae: Autoencoder, proj: Projection):
    arrays = {"meta.arch": np.array([ae.height, ae.width] + [v for l in ae.layers for v in l], np.float32),
              "projection.A": proj.matrix}
    arrays.update(state_dict(ae.params()))
    save_arrays(path, arrays)


def load_autoencoder(path):
    arrays = load_arrays(path)
    meta = [int(v) for v in arrays["meta.arch"]]
    layers = [tuple(meta[i:i + 2]) for i in range(2, len(meta), 2)]
    ae = Autoencoder(meta[0], meta[1], layers=layers)
    load_state_dict(ae.params(), arrays)
    return ae, Projection(*arrays["projection.A"].shape, matrix=arrays["projection.A"])
