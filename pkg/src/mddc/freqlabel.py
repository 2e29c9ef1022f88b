"""Pseudo-domain labeling from low-frequency spectral statistics.

Every real image gets a domain id without supervision: compute the 2-D
DFT per channel, center-shift it, average the amplitude over a central
crop (ratio ``beta``), then either rank-and-slice the per-image means
into equal groups or cluster them with 1-D k-means.  Log-variance of
early ConvNet features and uniform random labels are provided as
alternative labeling strategies.

Power-of-two sizes go through a radix-2 FFT; anything else falls back to
the exact dense-matrix DFT.  Both paths compute the same transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value

METHODS = ("fft-meansort", "fft-kmeans", "logvar-meansort", "logvar-kmeans",
           "random")
ORDERS = ("ascending", "descending")

_bitrev_cache: dict[int, np.ndarray] = {}


def _bitrev_indices(n: int) -> np.ndarray:
    if n not in _bitrev_cache:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        rev = np.zeros(n, dtype=np.intp)
        for b in range(bits):
            rev |= ((idx >> b) & 1) << (bits - 1 - b)
        _bitrev_cache[n] = rev
    return _bitrev_cache[n]


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _fft_lastaxis(a: np.ndarray) -> np.ndarray:
    """Iterative radix-2 DIT FFT along the last axis (power-of-two length)."""
    n = a.shape[-1]
    x = np.asarray(a, dtype=np.complex128)[..., _bitrev_indices(n)]
    half = 1
    while half < n:
        x = x.reshape(x.shape[:-1] + (n // (2 * half), 2, half))
        tw = np.exp((-1j * np.pi / half) * np.arange(half))
        e = x[..., 0, :]
        o = x[..., 1, :] * tw
        x = np.concatenate([e + o, e - o], axis=-1)
        x = x.reshape(x.shape[:-2] + (n * 1,))
        half *= 2
    return x


def _dft_matrix(n: int) -> np.ndarray:
    u = np.arange(n)
    return np.exp((-2j * np.pi / n) * np.outer(u, u))


def _dft_lastaxis(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.complex128) @ _dft_matrix(a.shape[-1])


def _transform_lastaxis(a: np.ndarray) -> np.ndarray:
    if _is_pow2(a.shape[-1]):
        return _fft_lastaxis(a)
    return _dft_lastaxis(a)


def dft2d(channel: np.ndarray) -> np.ndarray:
    """2-D DFT of one real channel; complex result, DC at [0,0]."""
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"dft2d expects H x W, got shape {x.shape}")
    return _dft2d_batch(x)


def _dft2d_batch(x: np.ndarray) -> np.ndarray:
    """DFT over the trailing two axes of any real/complex array."""
    out = _transform_lastaxis(x)
    out = _transform_lastaxis(out.swapaxes(-1, -2)).swapaxes(-1, -2)
    return out


def fftshift2d(f: np.ndarray) -> np.ndarray:
    """Move the DC bin of the trailing two axes to the center."""
    h, w = f.shape[-2], f.shape[-1]
    return np.roll(np.roll(f, h // 2, axis=-2), w // 2, axis=-1)


@dataclass
class SpectrumGrid:
    """Per-channel complex spectrum, stored channels-last [H,W,3]."""
    values: np.ndarray
    shifted: bool = False


def image_spectrum(image: np.ndarray) -> SpectrumGrid:
    """Shifted spectrum of one image [C,H,W]; grayscale is replicated."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"image must be [C,H,W], got {img.shape}")
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    spec = fftshift2d(_dft2d_batch(img))
    return SpectrumGrid(np.ascontiguousarray(spec.transpose(1, 2, 0)), True)


def _crop_bounds(n: int, beta: float) -> tuple[int, int]:
    side = max(int(n * beta + 0.5), 1)
    lo = n // 2 - side // 2
    return lo, lo + side


def mean_amplitude(spec: SpectrumGrid, beta: float) -> float:
    """Mean amplitude over the centered crop, normalized by 3*beta^2*H*W."""
    if not spec.shifted:
        raise ValueError("mean_amplitude needs a center-shifted spectrum")
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must be in (0, 1], got {beta}")
    h, w, _ = spec.values.shape
    r0, r1 = _crop_bounds(h, beta)
    c0, c1 = _crop_bounds(w, beta)
    total = float(np.sum(np.abs(spec.values[r0:r1, c0:c1, :])))
    return total / (3.0 * beta * beta * h * w)


def dataset_mean_amplitudes(images: np.ndarray, beta: float,
                            chunk: int = 256) -> np.ndarray:
    """Per-image mu over a [N,3,H,W] stack; chunked to bound memory."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must be in (0, 1], got {beta}")
    n, c, h, w = images.shape
    r0, r1 = _crop_bounds(h, beta)
    c0, c1 = _crop_bounds(w, beta)
    mus = np.empty(n)
    for s in range(0, n, chunk):
        block = images[s:s + chunk]
        if block.shape[1] == 1:
            block = np.repeat(block, 3, axis=1)
        spec = fftshift2d(_dft2d_batch(block))
        amp = np.abs(spec[:, :, r0:r1, c0:c1])
        mus[s:s + chunk] = amp.sum(axis=(1, 2, 3)) / (3.0 * beta * beta * h * w)
    return mus


def rank_and_slice(mus, num_domains: int, order: str = "ascending") -> np.ndarray:
    """Equal-group labels: d = floor((rank-1) / (N/D)), ranks 1-based.

    Ties in mu are broken by original index (stable sort).  The division
    is by the real-valued N/D, computed exactly in integer arithmetic.
    """
    mus = np.asarray(mus, dtype=np.float64)
    n = mus.size
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}, got {order!r}")
    if not 1 <= num_domains <= n:
        raise ValueError(f"need 1 <= D <= N, got D={num_domains}, N={n}")
    key = mus if order == "ascending" else -mus
    ranked = np.argsort(key, kind="stable")
    labels = np.empty(n, dtype=np.int64)
    for r, idx in enumerate(ranked):
        labels[idx] = (r * num_domains) // n
    return labels


def kmeans_1d(values, k: int, seed: int | None = None,
              max_iters: int = 300) -> np.ndarray:
    """Lloyd's algorithm on scalars, quantile-seeded, ids by ascending centroid.

    Quantile seeding makes the result independent of ``seed``; the argument
    is accepted so every labeling method shares one calling convention.
    """
    del seed
    vals = np.asarray(values, dtype=np.float64)
    uniq = np.unique(vals)
    if k < 1 or k > uniq.size:
        raise ValueError(f"k={k} exceeds {uniq.size} distinct values")
    centroids = np.quantile(uniq, (np.arange(k) + 0.5) / k)
    assign = np.full(vals.size, -1, dtype=np.int64)
    for _ in range(max_iters):
        dist = np.abs(vals[:, None] - centroids[None, :])
        new_assign = np.argmin(dist, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = vals[assign == j]
            if members.size:
                centroids[j] = members.mean()
    # relabel so cluster ids follow ascending centroid order
    remap = np.empty(k, dtype=np.int64)
    remap[np.argsort(centroids, kind="stable")] = np.arange(k)
    return remap[assign]


def logvar_features(images: np.ndarray, params, chunk: int = 256) -> np.ndarray:
    """Mean log spatial variance of block-1 and block-2 feature maps.

    For each image the spatial variance of every channel map after the
    first two conv blocks is computed, log(var + 1e-8) taken, and all
    maps averaged into a single scalar.
    """
    from .embedder import channel_bias_add

    n = images.shape[0]
    out = np.empty(n)
    for s in range(0, n, chunk):
        x = Value(images[s:s + chunk])
        per_block = []
        for kernel, bias in params.blocks[:2]:
            x = ad.avg_pool2d(ad.relu(channel_bias_add(
                ad.conv2d(x, kernel, 1, 1), bias)), 2)
            fm = x.data
            var = fm.var(axis=(2, 3))  # spatial variance per map [B,C]
            per_block.append(np.log(var + 1e-8))
        out[s:s + chunk] = np.concatenate(per_block, axis=1).mean(axis=1)
    return out


def random_labels(n: int, num_domains: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    return rng.integers(0, num_domains, size=n, dtype=np.int64)


@dataclass
class PseudoDomainAssignment:
    labels: np.ndarray
    num_domains: int
    method: str = "fft-meansort"
    beta: float = 0.25
    order: str = "ascending"
    seed: int = 0
    stats: np.ndarray = field(default=None, repr=False)  # mu or logvar per image


def assign_pseudo_domains(images: np.ndarray, method: str, num_domains: int,
                          beta: float = 0.25, order: str = "ascending",
                          seed: int = 0, embedder_params=None,
                          ) -> PseudoDomainAssignment:
    """Label a [N,3,H,W] image stack with one of the supported strategies."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    n = images.shape[0]
    stats = None
    if method.startswith("fft"):
        stats = dataset_mean_amplitudes(images, beta)
    elif method.startswith("logvar"):
        if embedder_params is None:
            from .embedder import ConvNetConfig, depth_for_resolution, init_convnet
            hw = images.shape[-1]
            cfg = ConvNetConfig(depth=depth_for_resolution(hw), width=64,
                                input_hw=hw)
            embedder_params = init_convnet(cfg, seed)
        stats = logvar_features(images, embedder_params)

    if method == "random":
        labels = random_labels(n, num_domains, seed)
    elif method.endswith("meansort"):
        labels = rank_and_slice(stats, num_domains, order)
    else:
        labels = kmeans_1d(stats, num_domains, seed)
    return PseudoDomainAssignment(labels, num_domains, method, beta, order,
                                  seed, stats)


def write_labels(path, assignment: PseudoDomainAssignment) -> None:
    """Text format: one header line, then `<index>,<mu>,<label>` per image."""
    a = assignment
    with open(path, "w") as fh:
        fh.write(f"# method={a.method} D={a.num_domains} beta={a.beta!r} "
                 f"order={a.order} seed={a.seed}\n")
        for i, lab in enumerate(a.labels):
            mu = float("nan") if a.stats is None else float(a.stats[i])
            fh.write(f"{i},{mu!r},{int(lab)}\n")


def read_labels(path) -> PseudoDomainAssignment:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# "):
            raise ValueError(f"{path}: missing labels header")
        meta = dict(tok.split("=", 1) for tok in header[2:].split())
        rows = [line.strip().split(",") for line in fh if line.strip()]
    idx = np.array([int(r[0]) for r in rows])
    if not np.array_equal(idx, np.arange(len(rows))):
        raise ValueError(f"{path}: image indices not contiguous")
    stats = np.array([float(r[1]) for r in rows])
    labels = np.array([int(r[2]) for r in rows], dtype=np.int64)
    return PseudoDomainAssignment(
        labels, int(meta["D"]), meta["method"], float(meta["beta"]),
        meta["order"], int(meta["seed"]), stats)
