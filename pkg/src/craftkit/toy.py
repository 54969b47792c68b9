"""Analytically constructed differentiable feature extractor and head.

The model is correlation -> ReLU -> global average pooling over a small set
of orthonormal edge-like stencils, optionally followed by a nonnegative
mixing layer, and an affine head. Everything is built from closed-form
stencils and probe calibration (no training), so ground-truth concept
directions, template locations, and exact vector-Jacobian products are all
available to tests.

Stencils live in the central 3x3 of a 5x5 frame: their correlation gates
open only within one pixel of a stamp, which keeps gradients local. The
ReLU subgradient at exactly zero is taken to be zero, so a clean zero
background contributes nothing; additive noise opens gates everywhere and
deliberately degrades gradient locality.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Rng, as_tensor4
from .npyio import load_npy, save_npy

# 2x2 Haar-style stencils in the central 3x3 of a 5x5 frame: vertical edge,
# horizontal edge, checkerboard; the fourth is a center-surround pattern
# orthogonalized against the first three below.
_VERT = np.array([[1.0, -1.0], [1.0, -1.0]])
_HORIZ = np.array([[1.0, 1.0], [-1.0, -1.0]])
_CHECKER = np.array([[1.0, -1.0], [-1.0, 1.0]])
_SURROUND = np.array([[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]])


def _frame(block, size=5):
    t = np.zeros((size, size))
    y0 = (size - block.shape[0]) // 2
    x0 = (size - block.shape[1]) // 2
    t[y0:y0 + block.shape[0], x0:x0 + block.shape[1]] = block
    return t / np.linalg.norm(t)


def _standard_stencils(k, size=5):
    base = [_frame(_VERT, size), _frame(_HORIZ, size), _frame(_CHECKER, size),
            _frame(_SURROUND, size)]
    if not 1 <= k <= len(base):
        raise ValueError(f"k must be 1..{len(base)}")
    stencils = []
    for t in base[:k]:
        for prev in stencils:  # Gram-Schmidt; the first three are already orthogonal
            t = t - float(np.sum(t * prev)) * prev
        stencils.append(t / np.linalg.norm(t))
    return np.stack(stencils)


@dataclass(frozen=True)
class ToyBackbone:
    """Correlation/ReLU/pool feature extractor with an affine head.

    templates has shape (k, th, tw, c_in). When mixing (k x k2, nonnegative)
    is present the model has two feature layers: layer 1 is the pooled
    template response, layer 2 is ReLU(layer1 @ mixing), and the head reads
    the final layer. Feature outputs are nonnegative by construction.
    """

    templates: np.ndarray
    head_weights: np.ndarray
    head_bias: float
    input_shape: tuple
    mixing: np.ndarray | None = None

    @property
    def n_templates(self):
        return self.templates.shape[0]

    @property
    def n_features(self):
        return self.mixing.shape[1] if self.mixing is not None else self.n_templates

    def _correlate(self, x):
        th, tw = self.templates.shape[1:3]
        windows = sliding_window_view(x, (th, tw), axis=(1, 2))
        # windows: (b, H', W', c, th, tw); templates: (k, th, tw, c)
        return np.einsum("bhwcij,kijc->bhwk", windows, self.templates)

    def feature_maps(self, x):
        """Pre-pooling ReLU correlation maps, (b, H', W', k)."""
        x = self._check_input(x)
        return np.maximum(self._correlate(x), 0.0)

    def features(self, x, layer=None):
        """Pooled nonnegative activations at the requested layer.

        layer 1 is the template layer; layer 2 (or None for the final
        layer) adds the mixing stage when present.
        """
        z1 = self.feature_maps(x).mean(axis=(1, 2))
        layer = self._resolve_layer(layer)
        if layer == 1:
            return z1
        return np.maximum(z1 @ self.mixing, 0.0)

    def head(self, a):
        """Affine readout of final-layer activations, one scalar per row."""
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != self.n_features:
            raise ValueError(f"activations must be (batch, {self.n_features})")
        return a @ self.head_weights + self.head_bias

    def predict(self, x):
        """Binary class: 1 where the head output is positive."""
        return (self.head(self.features(x)) > 0.0).astype(np.int64)

    def head_gradients(self, x=None, n=1):
        """Rows of d head / d activation; constant for an affine head."""
        count = len(x) if x is not None else n
        return np.tile(self.head_weights, (count, 1))

    def vjp_features(self, x, cotangent, layer=None):
        """Exact gradient of <features(x, layer), cotangent> w.r.t. x."""
        x = self._check_input(x)
        cot = np.asarray(cotangent, dtype=np.float64)
        layer = self._resolve_layer(layer)
        z1_maps = self._correlate(x)
        b, hp, wp, k = z1_maps.shape
        if layer == 2:
            z1 = np.maximum(z1_maps, 0.0).mean(axis=(1, 2))
            gate2 = (z1 @ self.mixing) > 0.0
            cot = (cot * gate2) @ self.mixing.T
        if cot.shape != (b, k):
            raise ValueError(f"cotangent must be (batch, {k}) at layer 1")
        gates = (z1_maps > 0.0).astype(np.float64)
        weights = gates * (cot[:, None, None, :] / (hp * wp))
        th, tw = self.templates.shape[1:3]
        dx = np.zeros_like(x)
        for i in range(th):
            for j in range(tw):
                dx[:, i:i + hp, j:j + wp, :] += np.einsum(
                    "bhwk,kc->bhwc", weights, self.templates[:, i, j, :])
        return dx

    def randomize_weights(self, seed):
        """Replace the stencils with unit-norm noise; head and mixing kept."""
        gen = Rng(seed, stream=901).generator()
        noise = gen.normal(size=self.templates.shape)
        noise /= np.sqrt((noise**2).sum(axis=(1, 2, 3), keepdims=True))
        return replace(self, templates=noise)

    def _check_input(self, x):
        x = as_tensor4(x, "images")
        if x.shape[1:] != tuple(self.input_shape):
            raise ValueError(f"input shape {x.shape[1:]} does not match "
                             f"model input {tuple(self.input_shape)}")
        return x

    def _resolve_layer(self, layer):
        if layer in (None, "final"):
            return 2 if self.mixing is not None else 1
        if layer in (1, "layer1"):
            return 1
        if layer in (2, "layer2") and self.mixing is not None:
            return 2
        raise ValueError(f"model has no layer {layer!r}")

    def template_directions(self, transform=None):
        """Unit feature vectors of clean single-stamp probe images.

        These are the ground-truth concept directions tests compare banks
        against. ``transform`` optionally maps the probe image batch before
        feature extraction (e.g. the crop-and-resize a pipeline applies),
        so the oracle matches what a bank actually sees.
        """
        h, w, c = self.input_shape
        th, tw = self.templates.shape[1:3]
        y0, x0 = (h - th) // 2, (w - tw) // 2
        probes = np.zeros((self.n_templates, h, w, c))
        for k in range(self.n_templates):
            probes[k, y0:y0 + th, x0:x0 + tw, :] = self.templates[k]
        if transform is not None:
            probes = transform(probes)
        acts = self.features(probes, layer=1)
        norms = np.linalg.norm(acts, axis=1, keepdims=True)
        return acts / np.where(norms > 0, norms, 1.0)


def _calibrate_head(model, target):
    """Head weights fitting probe_activations @ w ~ target.

    target[k] is the desired head response (before bias) to a clean image
    stamped with template k. Ridge regularization keeps the weights sane
    when probe activations are nearly collinear (the template responses
    overlap substantially).
    """
    h, w, c = model.input_shape
    th, tw = model.templates.shape[1:3]
    y0, x0 = (h - th) // 2, (w - tw) // 2
    probes = np.zeros((model.n_templates, h, w, c))
    for k in range(model.n_templates):
        probes[k, y0:y0 + th, x0:x0 + tw, :] = model.templates[k]
    acts = model.features(probes)
    target = np.asarray(target, dtype=np.float64)
    gram = acts.T @ acts
    ridge = 1e-3 * np.trace(gram) / gram.shape[0]
    return np.linalg.solve(gram + ridge * np.eye(gram.shape[0]), acts.T @ target)


def standard_backbone(k=4, input_shape=(16, 16, 1), template_size=5, favored=0):
    """The default single-layer model: k orthonormal stencils, affine head
    calibrated so the head is positive exactly when the favored template is
    present in a clean image.
    """
    stencils = _standard_stencils(k, template_size)[..., None]
    if input_shape[2] != 1:
        raise ValueError("standard backbone is single-channel")
    model = ToyBackbone(templates=stencils, head_weights=np.zeros(k),
                        head_bias=-0.5, input_shape=tuple(input_shape))
    target = np.zeros(k)
    target[favored] = 1.0
    return replace(model, head_weights=_calibrate_head(model, target))


def pair_backbone(input_shape=(16, 16, 1), template_size=5):
    """Two-template model whose class contains BOTH template types.

    Head responses to clean single stamps are calibrated to ~(1.0, 0.45)
    with bias -0.25, so any stamped image lands in the positive class while
    the head still clearly favors template 0. This is the construction the
    end-to-end concept-recovery checks use: one class, two concepts of
    unequal importance.
    """
    stencils = _standard_stencils(2, template_size)[..., None]
    model = ToyBackbone(templates=stencils, head_weights=np.zeros(2),
                        head_bias=-0.25, input_shape=tuple(input_shape))
    return replace(model, head_weights=_calibrate_head(model, [1.0, 0.45]))


def two_layer_backbone(input_shape=(16, 16, 1), template_size=5):
    """Four primitives mixed pairwise into two composite features.

    Composite 0 blends primitives 0 and 1, composite 1 blends primitives 2
    and 3, reproducing the situation where a single later-layer concept
    merges two earlier-layer directions. Head calibration mirrors
    pair_backbone: both composites positive, composite 0 favored.
    """
    stencils = _standard_stencils(4, template_size)[..., None]
    mixing = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    model = ToyBackbone(templates=stencils, head_weights=np.zeros(2),
                        head_bias=-0.25, input_shape=tuple(input_shape),
                        mixing=mixing)
    return replace(model, head_weights=_calibrate_head(model, [1.0, 1.0, 0.45, 0.45]))


@dataclass(frozen=True)
class SyntheticDataset:
    """Images with labels and exact stamp provenance.

    stamps[i] lists (template index, y0, x0) for every stamp in image i;
    labels flag the presence of the head-favored template.
    """

    images: np.ndarray
    labels: np.ndarray
    stamps: tuple


def make_synthetic_dataset(model, n, noise, seed, max_stamps=3, template_pool=None,
                           favored=0):
    """Compose n images by stamping templates at non-overlapping positions.

    Each image places between 1 and max_stamps distinct templates drawn
    from template_pool (default: all of them) uniformly at random, then
    adds uniform noise in [0, noise). Identical seeds give bit-identical
    datasets.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    h, w, c = model.input_shape
    th, tw = model.templates.shape[1:3]
    pool = list(range(model.n_templates)) if template_pool is None else list(template_pool)
    max_stamps = max(1, min(max_stamps, len(pool)))
    gen = Rng(seed).generator()

    images = np.zeros((n, h, w, c))
    labels = np.zeros(n, dtype=np.int64)
    stamps = []
    for i in range(n):
        if noise > 0:
            images[i] = gen.uniform(0.0, noise, size=(h, w, c))
        count = int(gen.integers(1, max_stamps + 1))
        chosen = gen.choice(pool, size=count, replace=False)
        placed = []
        for t_idx in chosen:
            for _ in range(1000):
                y0 = int(gen.integers(0, h - th + 1))
                x0 = int(gen.integers(0, w - tw + 1))
                if all(abs(y0 - py) >= th or abs(x0 - px) >= tw for _, py, px in placed):
                    break
            else:
                raise RuntimeError("could not place stamps without overlap")
            images[i, y0:y0 + th, x0:x0 + tw, :] += model.templates[t_idx]
            placed.append((int(t_idx), y0, x0))
        labels[i] = int(any(t == favored for t, _, _ in placed))
        stamps.append(tuple(placed))
    return SyntheticDataset(images=images, labels=labels, stamps=tuple(stamps))


def save_backbone(model, directory):
    """Persist templates, head, and optional mixing as an NPY bundle."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_npy(model.templates, directory / "templates.npy")
    save_npy(model.head_weights.reshape(1, -1), directory / "head_weights.npy")
    manifest = {
        "input_shape": list(model.input_shape),
        "head_bias": model.head_bias,
        "has_mixing": model.mixing is not None,
    }
    if model.mixing is not None:
        save_npy(model.mixing, directory / "mixing.npy")
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_backbone(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    templates = load_npy(directory / "templates.npy")
    head_weights = load_npy(directory / "head_weights.npy").ravel()
    mixing = load_npy(directory / "mixing.npy") if manifest["has_mixing"] else None
    return ToyBackbone(templates=templates, head_weights=head_weights,
                       head_bias=float(manifest["head_bias"]),
                       input_shape=tuple(manifest["input_shape"]), mixing=mixing)
