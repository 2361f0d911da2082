"""Fully connected networks with independent Gaussian weight posteriors.

A model is an ordered list of layers. Layer ``k`` maps the post-activation
vector ``z_k`` to the pre-activation ``zeta_{k+1} = W_k @ (z_k, 1)`` where the
rows of ``W_k`` are independent Gaussians; the layer's ``activation`` tag is
the nonlinearity applied to *its own output* to produce ``z_{k+1}``.  The
last layer is always tagged ``identity``: the network output is the final
pre-activation.

Biases are folded into the last column of each mean matrix and into the
corresponding row/column of each covariance block, so a layer with ``in_dim``
inputs stores ``(in_dim + 1)``-wide rows throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT = "bnn-dp-model/v1"
ACTIVATIONS = ("relu", "identity")

# Eigenvalues of a stored covariance may dip slightly negative after a
# serialize/parse round trip; anything above this floor is clamped to zero,
# anything below it is a hard validation error.
PSD_TOL = -1e-10


class ModelFormatError(ValueError):
    """Raised when a model file or dictionary fails validation."""


def _fail(msg, layer=None, node=None):
    loc = ""
    if layer is not None:
        loc = f" (layer {layer}" + (f", node {node})" if node is not None else ")")
    raise ModelFormatError(msg + loc)


@dataclass(frozen=True)
class LayerPosterior:
    """One stochastic affine layer: per-node Gaussian rows over (z, 1).

    ``mean`` has shape ``(out_dim, in_dim + 1)``.  ``cov`` is either a
    ``(out_dim, in_dim + 1)`` array of per-entry variances (``cov_type ==
    "diagonal"``) or a ``(out_dim, in_dim + 1, in_dim + 1)`` stack of PSD
    matrices (``cov_type == "full"``).  For the full case ``eig_vals`` /
    ``eig_vecs`` hold the per-node eigendecomposition computed during
    validation (eigenvalues clamped at zero); for the diagonal case
    ``eig_vals`` aliases the clamped variances and ``eig_vecs`` is None.
    """

    mean: np.ndarray
    cov_type: str
    cov: np.ndarray
    activation: str
    eig_vals: np.ndarray
    eig_vecs: np.ndarray | None

    @property
    def in_dim(self):
        return self.mean.shape[1] - 1

    @property
    def out_dim(self):
        return self.mean.shape[0]

    @staticmethod
    def build(mean, cov_type, cov, activation, layer=None):
        """Validate raw arrays and construct, reporting the layer index on error."""
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        if activation not in ACTIVATIONS:
            _fail(f"unknown activation tag {activation!r}", layer)
        if mean.ndim != 2 or mean.shape[1] < 2:
            _fail(f"mean must be 2-D with at least 2 columns, got shape {mean.shape}", layer)
        if not np.all(np.isfinite(mean)):
            _fail("mean contains non-finite entries", layer)
        n_out, width = mean.shape

        if cov_type == "diagonal":
            if cov.ndim != 2:
                _fail(f"diagonal covariance must be 2-D, got shape {cov.shape}", layer)
            if cov.shape[0] != n_out:
                _fail(
                    f"dimension mismatch: {n_out} mean rows but {cov.shape[0]} covariance blocks",
                    layer,
                )
            if cov.shape[1] != width:
                _fail(f"diagonal covariance width {cov.shape[1]} != mean width {width}", layer)
            if not np.all(np.isfinite(cov)):
                _fail("covariance contains non-finite entries", layer)
            bad = np.nonzero(np.min(cov, axis=1) < PSD_TOL)[0]
            if bad.size:
                _fail(
                    f"covariance not PSD: negative variance {cov[bad[0]].min():.3e}",
                    layer,
                    int(bad[0]),
                )
            clamped = np.maximum(cov, 0.0)
            return LayerPosterior(mean, "diagonal", clamped, activation, clamped, None)

        if cov_type == "full":
            if cov.ndim != 3 or cov.shape[1:] != (width, width):
                _fail(
                    f"full covariance must have shape (nodes, {width}, {width}), got {cov.shape}",
                    layer,
                )
            if cov.shape[0] != n_out:
                _fail(
                    f"dimension mismatch: {n_out} mean rows but {cov.shape[0]} covariance blocks",
                    layer,
                )
            if not np.all(np.isfinite(cov)):
                _fail("covariance contains non-finite entries", layer)
            asym = np.abs(cov - np.swapaxes(cov, 1, 2)).max(axis=(1, 2))
            scale = np.maximum(1.0, np.abs(cov).max(axis=(1, 2)))
            bad = np.nonzero(asym > 1e-9 * scale)[0]
            if bad.size:
                _fail("covariance not symmetric", layer, int(bad[0]))
            sym = 0.5 * (cov + np.swapaxes(cov, 1, 2))
            vals, vecs = np.linalg.eigh(sym)
            bad = np.nonzero(vals.min(axis=1) < PSD_TOL)[0]
            if bad.size:
                _fail(
                    f"covariance not PSD: min eigenvalue {vals[bad[0]].min():.3e}",
                    layer,
                    int(bad[0]),
                )
            vals = np.maximum(vals, 0.0)
            return LayerPosterior(mean, "full", sym, activation, vals, vecs)

        _fail(f"unknown covariance type {cov_type!r}", layer)


@dataclass(frozen=True)
class BnnModel:
    """An immutable stack of LayerPosterior plus the task tag.

    With ``K + 1`` layers the network computes ``x = z_0 -> zeta_1 -> z_1 ->
    ... -> zeta_{K+1}`` and returns the final pre-activation.  Instances are
    safe to share across threads; nothing here mutates after construction.
    """

    layers: tuple
    task: str

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    @property
    def depth(self):
        """Number of hidden layers (K)."""
        return len(self.layers) - 1

    @staticmethod
    def build(layers, task):
        if task not in ("regression", "classification"):
            _fail(f"unknown task {task!r}")
        if not layers:
            _fail("model has no layers")
        layers = tuple(layers)
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                _fail(
                    f"dimension mismatch: layer {k - 1} emits {layers[k - 1].out_dim} "
                    f"but layer {k} expects {layers[k].in_dim}",
                    k,
                )
        if layers[-1].activation != "identity":
            _fail("final layer activation must be identity", len(layers) - 1)
        return BnnModel(layers, task)


def _layer_to_json(layer):
    cov_values = layer.cov.tolist()
    return {
        "activation": layer.activation,
        "mean": layer.mean.tolist(),
        "covariance": {"type": layer.cov_type, "values": cov_values},
    }


def model_to_dict(model):
    return {
        "format": FORMAT,
        "task": model.task,
        "layers": [_layer_to_json(layer) for layer in model.layers],
    }


def model_from_dict(obj):
    """Validate a parsed JSON object into a BnnModel."""
    if not isinstance(obj, dict):
        _fail("top level must be an object")
    if obj.get("format") != FORMAT:
        _fail(f"unsupported format tag {obj.get('format')!r}, expected {FORMAT!r}")
    raw_layers = obj.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        _fail("'layers' must be a non-empty list")
    layers = []
    for k, entry in enumerate(raw_layers):
        if not isinstance(entry, dict):
            _fail("layer entry must be an object", k)
        covariance = entry.get("covariance")
        if not isinstance(covariance, dict) or "type" not in covariance or "values" not in covariance:
            _fail("covariance must be an object with 'type' and 'values'", k)
        try:
            layers.append(
                LayerPosterior.build(
                    entry.get("mean"),
                    covariance["type"],
                    covariance["values"],
                    entry.get("activation"),
                    layer=k,
                )
            )
        except ModelFormatError:
            raise
        except (TypeError, ValueError) as exc:
            _fail(f"could not parse layer arrays: {exc}", k)
    return BnnModel.build(layers, obj.get("task"))


def load_model(path):
    """Parse and validate a model file.  Raises ModelFormatError with the
    offending layer/node index on any invariant violation."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"parse error in {path}: {exc}") from exc
    return model_from_dict(obj)


def save_model(model, path):
    """Serialize deterministically; floats print shortest-round-trip."""
    text = json.dumps(model_to_dict(model), indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def gen_model(widths, seed, *, task="regression", activation="relu",
              scale=1.0, cov_type="diagonal"):
    """Reproducible random model on a counter-based stream.

    Means are N(0, scale^2 / fan_in) and diagonal variances are
    Uniform(0, scale^2 / fan_in), fan_in being the layer input width.  With
    ``cov_type="full"`` each node instead gets a random-orthogonal-basis PSD
    matrix whose eigenvalues follow the same uniform law, so both flavors
    have comparable magnitudes.  The same (widths, seed, options) tuple
    always yields a bit-identical model.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError("widths must list input, (hidden...,) output sizes")
    if any(w < 1 for w in widths):
        raise ValueError("widths must all be >= 1")
    if not scale > 0:
        raise ValueError("scale must be positive")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation tag {activation!r}")
    if cov_type not in ("diagonal", "full"):
        raise ValueError(f"unknown covariance type {cov_type!r}")

    rng = np.random.Generator(np.random.Philox(seed))
    layers = []
    last = len(widths) - 2
    for k in range(len(widths) - 1):
        n_in, n_out = widths[k], widths[k + 1]
        bound = scale * scale / n_in
        mean = rng.normal(0.0, np.sqrt(bound), size=(n_out, n_in + 1))
        act = "identity" if k == last else activation
        if cov_type == "diagonal":
            cov = rng.uniform(0.0, bound, size=(n_out, n_in + 1))
        else:
            width = n_in + 1
            lam = rng.uniform(0.0, bound, size=(n_out, width))
            raw = rng.normal(size=(n_out, width, width))
            q, r = np.linalg.qr(raw)
            # fix the QR sign ambiguity so the draw is platform-stable
            signs = np.sign(np.einsum("nii->ni", r))
            signs[signs == 0] = 1.0
            q = q * signs[:, None, :]
            cov = np.einsum("nij,nj,nkj->nik", q, lam, q)
            cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        layers.append(LayerPosterior.build(mean, cov_type, cov, act, layer=k))
    return BnnModel.build(layers, task)


def sample_weights(model, seed, count=None):
    """Draw weight matrices from the posterior, deterministically per seed.

    Returns a list with one array per layer: shape ``(out, in+1)`` when
    ``count`` is None, else ``(count, out, in+1)``.  Zero covariance gives
    back the means exactly.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    batch = () if count is None else (int(count),)
    out = []
    for layer in model.layers:
        shape = batch + layer.mean.shape
        noise = rng.standard_normal(shape)
        if layer.cov_type == "diagonal":
            w = layer.mean + np.sqrt(layer.cov) * noise
        else:
            # per node: mean + (U sqrt(L)) @ xi
            factor = layer.eig_vecs * np.sqrt(layer.eig_vals)[:, None, :]
            w = layer.mean + np.einsum("nij,...nj->...ni", factor, noise)
        out.append(w)
    return out


def forward(weights, x, activations=None):
    """Run one deterministic weight draw on an input vector or a batch of rows.

    ``activations`` lists one tag per layer; None means relu on every layer
    except the last (which is the network output and stays linear).
    """
    x = np.asarray(x, dtype=float)
    if activations is None:
        activations = ["relu"] * (len(weights) - 1) + ["identity"]
    z = x
    for w, act in zip(weights, activations):
        zeta = z @ w[:, :-1].T + w[:, -1]
        z = np.maximum(zeta, 0.0) if act == "relu" else zeta
    return z
