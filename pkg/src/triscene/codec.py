"""Triplane autoencoder: encode a voxel scene into three axis-aligned feature
planes and decode class probabilities at arbitrary continuous coordinates.

Coordinates are normalized to [0,1]^3 over the scene extent with the
cell-center convention: voxel (i,j,k) sits at ((i+.5)/X, (j+.5)/Y, (k+.5)/Z).
Plane lookups are bilinear with clamp-to-edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import TrainingDivergedError
from .scenes import SemanticGrid, ClassWeights, compute_class_weights


@dataclass(eq=False)
class Triplane:
    """Three axis-aligned feature planes spanning a scene of `scene_dims`.

    xy: (C, X_h, Y_h), xz: (C, X_h, Z_h), yz: (C, Y_h, Z_h) with
    X_h = X/s, Y_h = Y/s and Z_h = Z for downsample factor s.
    """

    xy: np.ndarray
    xz: np.ndarray
    yz: np.ndarray
    scene_dims: tuple[int, int, int]

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float32)
        self.xz = np.asarray(self.xz, dtype=np.float32)
        self.yz = np.asarray(self.yz, dtype=np.float32)
        c = {self.xy.shape[0], self.xz.shape[0], self.yz.shape[0]}
        if len(c) != 1:
            raise ValueError(f"planes disagree on channel count: {sorted(c)}")
        if self.xy.shape[1] != self.xz.shape[1]:
            raise ValueError("xy and xz disagree on X_h")
        if self.xy.shape[2] != self.yz.shape[1]:
            raise ValueError("xy and yz disagree on Y_h")
        if self.xz.shape[2] != self.yz.shape[2]:
            raise ValueError("xz and yz disagree on Z_h")
        for name in ("xy", "xz", "yz"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in plane {name}")

    @property
    def channels(self) -> int:
        return self.xy.shape[0]

    @property
    def plane_dims(self) -> tuple[int, int, int]:
        """(X_h, Y_h, Z_h)"""
        return (self.xy.shape[1], self.xy.shape[2], self.xz.shape[2])

    def copy(self) -> "Triplane":
        return Triplane(self.xy.copy(), self.xz.copy(), self.yz.copy(), self.scene_dims)


def positional_encoding(points, octaves: int = 6) -> np.ndarray:
    """Sinusoidal embedding [sin(2^0 pi p), cos(2^0 pi p), ...] per octave,
    concatenated over the three coordinates; output dim 2 * octaves * 3."""
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    p = np.asarray(points, dtype=np.float64)
    if p.shape[-1] != 3:
        raise ValueError(f"points must have a trailing dimension of 3, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("points must be finite")
    parts = []
    for level in range(octaves):
        angle = (2.0 ** level) * np.pi * p
        parts.append(np.sin(angle))
        parts.append(np.cos(angle))
    return np.concatenate(parts, axis=-1).astype(np.float32)


def _pe_torch(p: torch.Tensor, octaves: int) -> torch.Tensor:
    parts = []
    for level in range(octaves):
        angle = (2.0 ** level) * torch.pi * p
        parts.append(torch.sin(angle))
        parts.append(torch.cos(angle))
    return torch.cat(parts, dim=-1)


def _bilinear_batch(planes: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Sample (B, C, H, W) planes at normalized coords a, b of shape (B, P).

    Cell-center alignment: coordinate a maps to u = a*H - 0.5; edges clamp.
    Returns (B, P, C).
    """
    B, C, H, W = planes.shape
    u = a * H - 0.5
    v = b * W - 0.5
    u0 = torch.floor(u)
    v0 = torch.floor(v)
    fu = (u - u0).unsqueeze(-1)
    fv = (v - v0).unsqueeze(-1)
    i0 = u0.long().clamp(0, H - 1)
    i1 = (u0.long() + 1).clamp(0, H - 1)
    j0 = v0.long().clamp(0, W - 1)
    j1 = (v0.long() + 1).clamp(0, W - 1)
    bidx = torch.arange(B, device=planes.device).unsqueeze(-1)
    p = planes.permute(0, 2, 3, 1)  # (B, H, W, C)
    c00 = p[bidx, i0, j0]
    c01 = p[bidx, i0, j1]
    c10 = p[bidx, i1, j0]
    c11 = p[bidx, i1, j1]
    top = c00 * (1 - fv) + c01 * fv
    bottom = c10 * (1 - fv) + c11 * fv
    return top * (1 - fu) + bottom * fu


def _sample_planes(xy: torch.Tensor, xz: torch.Tensor, yz: torch.Tensor,
                   points: torch.Tensor) -> torch.Tensor:
    """Sum of the three bilinear plane lookups; planes are (B, C, ., .),
    points (B, P, 3) in [0,1]^3. Returns (B, P, C)."""
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    return (_bilinear_batch(xy, x, y)
            + _bilinear_batch(xz, x, z)
            + _bilinear_batch(yz, y, z))


def _check_unit_points(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float32)
    if p.shape[-1] != 3:
        raise ValueError(f"points must have a trailing dimension of 3, got {p.shape}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("points must lie in [0,1]^3")
    return p


def sample_triplane(tp: Triplane, points) -> np.ndarray:
    """Feature vector h(p) = h_xy(x,y) + h_xz(x,z) + h_yz(y,z) for points in
    [0,1]^3; accepts a single point (3,) or a batch (..., 3)."""
    p = _check_unit_points(points)
    flat = torch.from_numpy(p.reshape(1, -1, 3))
    with torch.no_grad():
        feats = _sample_planes(
            torch.from_numpy(tp.xy).unsqueeze(0),
            torch.from_numpy(tp.xz).unsqueeze(0),
            torch.from_numpy(tp.yz).unsqueeze(0),
            flat)
    out = feats.squeeze(0).numpy()
    return out.reshape(p.shape[:-1] + (tp.channels,))


class SceneEncoder(nn.Module):
    """Six 3D conv stages over one-hot labels with one residual skip; the x and
    y axes are strided down by `downsample`, z is kept at full resolution."""

    def __init__(self, n_classes: int, plane_channels: int,
                 channels=(32, 64, 64, 64, 64), downsample: int = 2):
        super().__init__()
        if downsample not in (1, 2):
            raise ValueError("downsample must be 1 or 2")
        if len(channels) != 5:
            raise ValueError("need widths for five stages (stage six emits the planes)")
        stride = (downsample, downsample, 1)
        c1, c2, c3, c4, c5 = channels
        self.conv1 = nn.Conv3d(n_classes, c1, 3, padding=1)
        self.conv2 = nn.Conv3d(c1, c2, 3, stride=stride, padding=1)
        self.conv3 = nn.Conv3d(c2, c3, 3, padding=1)
        self.conv4 = nn.Conv3d(c3, c4, 3, padding=1)
        self.conv5 = nn.Conv3d(c4, c5, 3, padding=1)
        self.conv6 = nn.Conv3d(c5, plane_channels, 3, padding=1)
        if c2 != c5:
            raise ValueError("stage-2 and stage-5 widths must match for the skip")

    def forward(self, onehot: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h1 = F.relu(self.conv1(onehot))
        h2 = F.relu(self.conv2(h1))
        h3 = F.relu(self.conv3(h2))
        h4 = F.relu(self.conv4(h3))
        h5 = F.relu(self.conv5(h4) + h2)  # skip
        vol = self.conv6(h5)  # (B, C, X_h, Y_h, Z)
        return vol.mean(dim=4), vol.mean(dim=3), vol.mean(dim=2)


class ImplicitDecoder(nn.Module):
    """Pointwise MLP: [plane feature, PE(p)] -> class logits. Four hidden
    layers with the input re-injected at the third."""

    def __init__(self, plane_channels: int, n_classes: int,
                 width: int = 128, pe_octaves: int = 6):
        super().__init__()
        self.pe_octaves = pe_octaves
        in_dim = plane_channels + 6 * pe_octaves
        self.fc1 = nn.Linear(in_dim, width)
        self.fc2 = nn.Linear(width, width)
        self.fc3 = nn.Linear(width + in_dim, width)
        self.fc4 = nn.Linear(width, width)
        self.out = nn.Linear(width, n_classes)

    def forward(self, feats: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        x = torch.cat([feats, _pe_torch(points, self.pe_octaves)], dim=-1)
        h = F.relu(self.fc1(x))
        h = F.relu(self.fc2(h))
        h = F.relu(self.fc3(torch.cat([h, x], dim=-1)))
        h = F.relu(self.fc4(h))
        return self.out(h)


def weighted_ce_loss(probs, labels, weights: ClassWeights) -> torch.Tensor:
    """Mean over points of -w_y * ln p_y."""
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(np.asarray(labels)).long()
    w = torch.as_tensor(weights.weights, dtype=probs.dtype)
    picked = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return (-w[labels] * torch.log(picked)).mean()


def _lovasz_grad(fg_sorted: torch.Tensor) -> torch.Tensor:
    gts = fg_sorted.sum()
    intersection = gts - fg_sorted.cumsum(0)
    union = gts + (1 - fg_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if fg_sorted.numel() > 1:
        jaccard = torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
    return jaccard


def lovasz_softmax_loss(probs, labels) -> torch.Tensor:
    """Lovasz extension of the Jaccard loss, averaged over classes present in
    the labels. Sorting ties break by original index so values are stable."""
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(np.asarray(labels)).long()
    losses = []
    for c in torch.unique(labels).tolist():
        fg = (labels == c).to(probs.dtype)
        errors = (fg - probs[:, c]).abs()
        err_sorted, perm = torch.sort(errors, dim=0, descending=True, stable=True)
        losses.append(torch.dot(err_sorted, _lovasz_grad(fg[perm])))
    return torch.stack(losses).mean()


def ae_loss(probs, labels, weights: ClassWeights, lovasz_weight: float = 1.0) -> torch.Tensor:
    """Weighted cross-entropy plus `lovasz_weight` times the Lovasz-softmax term."""
    loss = weighted_ce_loss(probs, labels, weights)
    if lovasz_weight:
        loss = loss + lovasz_weight * lovasz_softmax_loss(probs, labels)
    return loss


def _grid_points(dims: tuple[int, int, int], device=None) -> torch.Tensor:
    """Cell centers of a (X, Y, Z) lattice as (X*Y*Z, 3) in [0,1]^3, x-major."""
    X, Y, Z = dims
    xs = (torch.arange(X, device=device) + 0.5) / X
    ys = (torch.arange(Y, device=device) + 0.5) / Y
    zs = (torch.arange(Z, device=device) + 0.5) / Z
    gx, gy, gz = torch.meshgrid(xs, ys, zs, indexing="ij")
    return torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)


class TriplaneAutoencoder(BaseEstimator):
    """Scene <-> triplane codec trained with weighted CE + Lovasz-softmax.

    fit() consumes a list of SemanticGrid; encode()/transform() produce
    Triplanes; decode_grid() reconstructs a scene at any target resolution.
    """

    def __init__(self, plane_channels=8, downsample=2, encoder_channels=(32, 64, 64, 64, 64),
                 mlp_width=128, pe_octaves=6, lovasz_weight=1.0, epochs=60,
                 batch_size=8, points_per_scene=4096, lr=1e-3, seed=0):
        self.plane_channels = plane_channels
        self.downsample = downsample
        self.encoder_channels = encoder_channels
        self.mlp_width = mlp_width
        self.pe_octaves = pe_octaves
        self.lovasz_weight = lovasz_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.points_per_scene = points_per_scene
        self.lr = lr
        self.seed = seed

    @classmethod
    def paper_scale(cls) -> "TriplaneAutoencoder":
        """Configuration used at full dataset scale: 256x256x32 scenes encoded
        to (128,128,32) planes with 16 channels, batches of 4."""
        return cls(plane_channels=16, downsample=2, batch_size=4,
                   points_per_scene=32768, epochs=200)

    def _check_grid(self, grid: SemanticGrid) -> None:
        X, Y, _ = grid.dims
        if X % self.downsample or Y % self.downsample:
            raise ValueError(
                f"grid dims {grid.dims} not divisible by downsample={self.downsample}")
        if hasattr(self, "n_classes_") and grid.n_classes != self.n_classes_:
            raise ValueError(
                f"grid has {grid.n_classes} classes, model was fit with {self.n_classes_}")

    def _onehot(self, grid: SemanticGrid) -> torch.Tensor:
        t = torch.from_numpy(grid.labels.astype(np.int64))
        return F.one_hot(t, self.n_classes_).permute(3, 0, 1, 2).float()

    def fit(self, grids: list[SemanticGrid], y=None) -> "TriplaneAutoencoder":
        if not grids:
            raise ValueError("need at least one training scene")
        dims = grids[0].dims
        for g in grids:
            if g.dims != dims or g.n_classes != grids[0].n_classes:
                raise ValueError("all training scenes must share dims and n_classes")
        self.n_classes_ = grids[0].n_classes
        self.class_names_ = grids[0].class_names
        self.palette_ = grids[0].palette.copy()
        self.scene_dims_ = dims
        self.voxel_size_ = grids[0].voxel_size
        for g in grids:
            self._check_grid(g)
        self.class_weights_ = compute_class_weights(grids, self.n_classes_)

        torch.manual_seed(self.seed)
        self.encoder_ = SceneEncoder(self.n_classes_, self.plane_channels,
                                     tuple(self.encoder_channels), self.downsample)
        self.decoder_ = ImplicitDecoder(self.plane_channels, self.n_classes_,
                                        self.mlp_width, self.pe_octaves)
        params = list(self.encoder_.parameters()) + list(self.decoder_.parameters())
        opt = torch.optim.Adam(params, lr=self.lr)

        onehots = torch.stack([self._onehot(g) for g in grids])
        labels = torch.stack([torch.from_numpy(g.labels.astype(np.int64)) for g in grids])
        flat_labels = labels.reshape(len(grids), -1)
        n_cells = int(np.prod(dims))
        w = torch.as_tensor(self.class_weights_.weights, dtype=torch.float32)
        dims_t = torch.tensor(dims, dtype=torch.float32)

        rng = torch.Generator().manual_seed(self.seed)
        order_rng = np.random.default_rng(self.seed)
        self.loss_log_ = []
        step = 0
        for _ in range(self.epochs):
            order = order_rng.permutation(len(grids))
            epoch_losses = []
            for start in range(0, len(grids), self.batch_size):
                batch = order[start:start + self.batch_size]
                b = len(batch)
                xy, xz, yz = self.encoder_(onehots[batch])
                idx = torch.randint(0, n_cells, (b, self.points_per_scene), generator=rng)
                i = idx // (dims[1] * dims[2])
                j = (idx // dims[2]) % dims[1]
                k = idx % dims[2]
                pts = (torch.stack([i, j, k], dim=-1).float() + 0.5) / dims_t
                target = flat_labels[torch.from_numpy(batch[:, None]), idx]
                feats = _sample_planes(xy, xz, yz, pts)
                logits = self.decoder_(feats, pts)
                probs = F.softmax(logits.reshape(-1, self.n_classes_), dim=-1)
                target = target.reshape(-1)
                ce = (-w[target] * torch.log(probs.gather(-1, target[:, None]).squeeze(-1)
                                             .clamp_min(1e-12))).mean()
                loss = ce + self.lovasz_weight * lovasz_softmax_loss(probs, target)
                loss_value = float(loss.detach())
                if not np.isfinite(loss_value):
                    raise TrainingDivergedError(step, loss_value)
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_losses.append(loss_value)
                step += 1
            self.loss_log_.append(float(np.mean(epoch_losses)))
        self.encoder_.eval()
        self.decoder_.eval()
        return self

    def encode(self, grid: SemanticGrid) -> Triplane:
        check_is_fitted(self, "encoder_")
        self._check_grid(grid)
        with torch.no_grad():
            xy, xz, yz = self.encoder_(self._onehot(grid).unsqueeze(0))
        return Triplane(xy[0].numpy(), xz[0].numpy(), yz[0].numpy(), grid.dims)

    def transform(self, grids: list[SemanticGrid]) -> list[Triplane]:
        return [self.encode(g) for g in grids]

    def decode_point(self, tp: Triplane, points) -> np.ndarray:
        """Class probabilities at continuous points in [0,1]^3; shape (..., N)."""
        check_is_fitted(self, "decoder_")
        p = _check_unit_points(points)
        flat = torch.from_numpy(p.reshape(1, -1, 3))
        with torch.no_grad():
            feats = _sample_planes(torch.from_numpy(tp.xy).unsqueeze(0),
                                   torch.from_numpy(tp.xz).unsqueeze(0),
                                   torch.from_numpy(tp.yz).unsqueeze(0), flat)
            logits = self.decoder_(feats.squeeze(0), flat.squeeze(0))
            probs = F.softmax(logits, dim=-1)
        return probs.numpy().reshape(p.shape[:-1] + (self.n_classes_,))

    def decode_grid(self, tp: Triplane, out_dims: tuple[int, int, int] | None = None,
                    chunk: int = 65536) -> SemanticGrid:
        """Argmax labels on the cell-center lattice of `out_dims` (defaults to
        the triplane's scene dims); any resolution is valid."""
        check_is_fitted(self, "decoder_")
        out_dims = tuple(out_dims or tp.scene_dims)
        if min(out_dims) < 1:
            raise ValueError(f"out_dims must be positive, got {out_dims}")
        pts = _grid_points(out_dims)
        xy = torch.from_numpy(tp.xy).unsqueeze(0)
        xz = torch.from_numpy(tp.xz).unsqueeze(0)
        yz = torch.from_numpy(tp.yz).unsqueeze(0)
        out = torch.empty(pts.shape[0], dtype=torch.int64)
        with torch.no_grad():
            for start in range(0, pts.shape[0], chunk):
                sl = pts[start:start + chunk]
                feats = _sample_planes(xy, xz, yz, sl.unsqueeze(0)).squeeze(0)
                logits = self.decoder_(feats, sl)
                out[start:start + chunk] = logits.argmax(dim=-1)
        labels = out.numpy().astype(np.uint16).reshape(out_dims)
        return SemanticGrid(labels=labels, n_classes=self.n_classes_,
                            voxel_size=self.voxel_size_,
                            class_names=self.class_names_, palette=self.palette_.copy())

    def reconstruct(self, grid: SemanticGrid) -> SemanticGrid:
        return self.decode_grid(self.encode(grid))
