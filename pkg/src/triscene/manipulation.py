"""Conditioned generation on triplanes: inpainting with resampling,
overlap-conditioned outpainting onto a tiled canvas, and refinement of
degraded scene-completion predictions.

A trimask marks triplane cells to regenerate (1) versus preserve (0); the
preserved side is re-anchored to the known triplane's diffused state at every
denoise step and copied bit-exactly into the final output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .codec import Triplane, TriplaneAutoencoder
from .diffusion import (TriplaneDiffusion, TriplaneUNet, make_schedule, posterior_step,
                        q_sample, roll_triplane, sample_rolled, unroll_triplane)
from .exceptions import TrainingDivergedError
from .scenes import SemanticGrid
from .seeds import derive_seed


@dataclass(eq=False)
class Trimask:
    """Binary masks on the three planes: 1 = regenerate, 0 = keep."""

    xy: np.ndarray
    xz: np.ndarray
    yz: np.ndarray

    def __post_init__(self):
        for name in ("xy", "xz", "yz"):
            arr = np.asarray(getattr(self, name), dtype=np.uint8)
            if arr.ndim != 2:
                raise ValueError(f"mask {name} must be 2D, got shape {arr.shape}")
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise ValueError(f"mask {name} must be binary")
            setattr(self, name, arr)
        if self.xy.shape[0] != self.xz.shape[0] or self.xy.shape[1] != self.yz.shape[0] \
                or self.xz.shape[1] != self.yz.shape[1]:
            raise ValueError("mask plane shapes are mutually inconsistent")

    @classmethod
    def zeros(cls, plane_dims: tuple[int, int, int]) -> "Trimask":
        xh, yh, zh = plane_dims
        return cls(np.zeros((xh, yh), np.uint8), np.zeros((xh, zh), np.uint8),
                   np.zeros((yh, zh), np.uint8))

    @classmethod
    def ones(cls, plane_dims: tuple[int, int, int]) -> "Trimask":
        m = cls.zeros(plane_dims)
        m.xy[:] = 1
        m.xz[:] = 1
        m.yz[:] = 1
        return m

    def matches(self, tp: Triplane) -> bool:
        return (self.xy.shape == tp.xy.shape[1:] and self.xz.shape == tp.xz.shape[1:]
                and self.yz.shape == tp.yz.shape[1:])

    def rolled(self) -> np.ndarray:
        """(H, W) layout matching `roll_triplane`."""
        return np.concatenate([self.xy, self.xz, self.yz], axis=1)


@dataclass(frozen=True)
class BoxRegion:
    """Half-open voxel box [x0,x1) x [y0,y1) x [z0,z1) in scene coordinates."""

    x0: int
    x1: int
    y0: int
    y1: int
    z0: int
    z1: int

    def __post_init__(self):
        for lo, hi, axis in ((self.x0, self.x1, "x"), (self.y0, self.y1, "y"),
                             (self.z0, self.z1, "z")):
            if lo < 0 or lo >= hi:
                raise ValueError(f"invalid {axis} range [{lo}, {hi})")

    def clipped_to(self, dims: tuple[int, int, int]) -> "BoxRegion":
        if self.x1 > dims[0] or self.y1 > dims[1] or self.z1 > dims[2]:
            raise ValueError(f"box {self} exceeds scene dims {dims}")
        return self


def trimask_from_boxes(boxes: list[BoxRegion], scene_dims: tuple[int, int, int],
                       downsample: int = 1) -> Trimask:
    """Union of the boxes' axis-aligned projections onto the three planes,
    scaled by the triplane downsample factor (z is never downsampled)."""
    X, Y, Z = scene_dims
    s = downsample
    mask = Trimask.zeros((X // s, Y // s, Z))
    for box in boxes:
        box.clipped_to(scene_dims)
        x0, x1 = box.x0 // s, -(-box.x1 // s)
        y0, y1 = box.y0 // s, -(-box.y1 // s)
        z0, z1 = box.z0, box.z1
        mask.xy[x0:x1, y0:y1] = 1
        mask.xz[x0:x1, z0:z1] = 1
        mask.yz[y0:y1, z0:z1] = 1
    return mask


def _axis_footprint(n_vox: int, n_cells: int) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear footprint (lo, hi cell index) of each voxel center along one axis."""
    u = (np.arange(n_vox) + 0.5) * n_cells / n_vox - 0.5
    lo = np.clip(np.floor(u).astype(np.int64), 0, n_cells - 1)
    hi = np.clip(np.floor(u).astype(np.int64) + 1, 0, n_cells - 1)
    return lo, hi


def fully_preserved_voxels(mask: Trimask, scene_dims: tuple[int, int, int]) -> np.ndarray:
    """Boolean (X, Y, Z): voxels whose decode reads only mask-0 cells on all
    three planes, i.e. whose labels inpainting provably cannot change."""
    X, Y, Z = scene_dims
    xh, yh = mask.xy.shape
    zh = mask.xz.shape[1]
    xlo, xhi = _axis_footprint(X, xh)
    ylo, yhi = _axis_footprint(Y, yh)
    zlo, zhi = _axis_footprint(Z, zh)

    def plane_clear(m, alo, ahi, blo, bhi):
        return ((m[np.ix_(alo, blo)] == 0) & (m[np.ix_(alo, bhi)] == 0)
                & (m[np.ix_(ahi, blo)] == 0) & (m[np.ix_(ahi, bhi)] == 0))

    ok_xy = plane_clear(mask.xy, xlo, xhi, ylo, yhi)
    ok_xz = plane_clear(mask.xz, xlo, xhi, zlo, zhi)
    ok_yz = plane_clear(mask.yz, ylo, yhi, zlo, zhi)
    return ok_xy[:, :, None] & ok_xz[:, None, :] & ok_yz[None, :, :]


def repaint_schedule(T: int, jump: int, resamples: int) -> list[tuple[int, str]]:
    """Resampling step plan: descending T..1 where, after every `jump` denoise
    steps, the state is re-noised forward `jump` steps and re-denoised,
    `resamples` passes over each segment in total.

    Entries are (t, "down") for a denoise transition h_t -> h_{t-1} and
    (t, "up") for a forward step arriving at h_t; the plan always ends with
    (1, "down") and never leaves [1, T].
    """
    if not 1 <= jump <= T:
        raise ValueError(f"jump must be in [1, T={T}], got {jump}")
    if resamples < 1:
        raise ValueError(f"resamples must be >= 1, got {resamples}")
    boundaries = set(range(T - jump, -1, -jump))
    steps: list[tuple[int, str]] = []
    t = T
    while t >= 1:
        steps.append((t, "down"))
        t -= 1
        if t in boundaries and resamples > 1:
            for _ in range(resamples - 1):
                for up_t in range(t + 1, t + jump + 1):
                    steps.append((up_t, "up"))
                for down_t in range(t + jump, t, -1):
                    steps.append((down_t, "down"))
    return steps


def inpaint(diffusion: TriplaneDiffusion, known: Triplane, mask: Trimask, seed: int,
            resamples: int = 5, jump: int = 20) -> Triplane:
    """Regenerate the masked triplane regions; mask-0 entries of the output
    are bit-equal to `known`.

    At every denoise step the preserved side is replaced by a fresh forward
    diffusion of `known` at the current t (drawn from a seed-derived stream
    independent of the sampler's own noise), then the final state gets the
    clean known values.
    """
    check_is_fitted(diffusion, "denoiser_")
    rolled_known, layout = roll_triplane(known)
    if layout != diffusion.layout_:
        raise ValueError(f"triplane layout {layout} does not match model {diffusion.layout_}")
    if not mask.matches(known):
        raise ValueError("mask shapes do not match the triplane")

    schedule = diffusion.schedule_
    k0 = diffusion._normalize(torch.from_numpy(rolled_known))
    m_rolled = mask.rolled()
    m = torch.from_numpy(m_rolled.astype(np.float32)).unsqueeze(0)
    gen_known = torch.Generator().manual_seed(derive_seed(seed, "known"))

    def override(h: torch.Tensor, t: int) -> torch.Tensor:
        if t == 0:
            return h
        noise = torch.randn(h.shape, generator=gen_known)
        h_known = q_sample(k0, t, noise, schedule)
        return m * h + (1.0 - m) * h_known

    generator = torch.Generator().manual_seed(seed)
    plan = repaint_schedule(schedule.T, jump, resamples)
    rolled = diffusion._denormalize(
        sample_rolled(diffusion.denoise_fn(), schedule, layout.shape, generator,
                      plan=plan, override=override)).numpy()
    keep = m_rolled == 0
    rolled[:, keep] = rolled_known[:, keep]
    return unroll_triplane(rolled, layout, known.scene_dims)


class SceneCanvas:
    """Unbounded 2D grid of scene tiles grown by outpainting.

    Tiles share geometry; neighbors overlap by `overlap_cells` triplane cells
    (overlap * downsample voxels). Committed tiles are immutable; commit order
    decides stitch priority (earliest wins).
    """

    def __init__(self, tile_dims: tuple[int, int, int], plane_channels: int,
                 downsample: int, overlap_cells: int | None = None):
        X, Y, Z = tile_dims
        if X != Y:
            raise ValueError("canvas tiles must be square in x/y")
        if X % downsample or Y % downsample:
            raise ValueError(f"tile dims {tile_dims} not divisible by downsample")
        self.tile_dims = (X, Y, Z)
        self.plane_channels = plane_channels
        self.downsample = downsample
        self.plane_size = X // downsample
        if overlap_cells is None:
            overlap_cells = self.plane_size // 4
        if not 0 < overlap_cells < self.plane_size - overlap_cells:
            raise ValueError(
                f"overlap must satisfy 0 < overlap < stride, got {overlap_cells} "
                f"of plane size {self.plane_size}")
        self.overlap_cells = overlap_cells
        self.tiles: dict[tuple[int, int], Triplane] = {}
        self.commit_order: list[tuple[int, int]] = []

    @property
    def stride_cells(self) -> int:
        return self.plane_size - self.overlap_cells

    @property
    def stride_voxels(self) -> int:
        return self.stride_cells * self.downsample

    def _check_tile(self, tp: Triplane) -> None:
        xh, yh, zh = tp.plane_dims
        if (xh, yh) != (self.plane_size, self.plane_size) or zh != self.tile_dims[2] \
                or tp.channels != self.plane_channels:
            raise ValueError("tile triplane geometry does not match the canvas")

    def commit(self, key: tuple[int, int], tp: Triplane) -> None:
        key = (int(key[0]), int(key[1]))
        if key in self.tiles:
            raise ValueError(f"tile {key} is already committed")
        self._check_tile(tp)
        self.tiles[key] = tp
        self.commit_order.append(key)

    def committed_neighbors(self, key: tuple[int, int]) -> list[tuple[tuple[int, int], Triplane]]:
        """8-neighborhood tiles in commit order."""
        i, j = key
        out = []
        for nkey in self.commit_order:
            di, dj = nkey[0] - i, nkey[1] - j
            if (di, dj) != (0, 0) and abs(di) <= 1 and abs(dj) <= 1:
                out.append((nkey, self.tiles[nkey]))
        return out

    def frontier(self) -> list[tuple[int, int]]:
        """Empty tiles adjacent (8-neighborhood) to at least one committed tile."""
        out = set()
        for (i, j) in self.tiles:
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    key = (i + di, j + dj)
                    if key not in self.tiles and key != (i, j):
                        out.add(key)
        return sorted(out)

    def bounds(self) -> tuple[int, int, int, int]:
        if not self.tiles:
            raise ValueError("canvas has no committed tiles")
        keys = list(self.tiles)
        return (min(k[0] for k in keys), max(k[0] for k in keys),
                min(k[1] for k in keys), max(k[1] for k in keys))

    def canvas_dims(self) -> tuple[int, int, int]:
        i0, i1, j0, j1 = self.bounds()
        X, Y, Z = self.tile_dims
        return ((i1 - i0) * self.stride_voxels + X, (j1 - j0) * self.stride_voxels + Y, Z)


def outpaint(diffusion: TriplaneDiffusion, canvas: SceneCanvas, key: tuple[int, int],
             seed: int, resamples: int = 5, jump: int = 20) -> Triplane:
    """Propose a triplane for the empty tile `key`, conditioned on the overlap
    strips shared with committed neighbors; the strips come out bit-equal.

    A plane cell is conditioned only where a neighbor spans the tile's full
    perpendicular extent (xz strips from east/west neighbors, yz strips from
    north/south, the xy corner for diagonals); earlier-committed neighbors win
    where strips overlap. The proposal is not committed.
    """
    if key in canvas.tiles:
        raise ValueError(f"tile {key} is already committed")
    neighbors = canvas.committed_neighbors(key)
    if not neighbors:
        raise ValueError(f"tile {key} has no committed neighbor to outpaint from")

    P = canvas.plane_size
    o = canvas.overlap_cells
    C = canvas.plane_channels
    Z = canvas.tile_dims[2]
    known = Triplane(np.zeros((C, P, P), np.float32), np.zeros((C, P, Z), np.float32),
                     np.zeros((C, P, Z), np.float32), canvas.tile_dims)
    mask = Trimask.ones((P, P, Z))

    def spans(delta: int) -> tuple[slice, slice]:
        if delta == -1:
            return slice(0, o), slice(P - o, P)
        if delta == 1:
            return slice(P - o, P), slice(0, o)
        return slice(0, P), slice(0, P)

    def copy_strip(dst_plane, src_plane, dst_mask, rows: tuple[slice, slice],
                   cols: tuple[slice, slice]):
        t_rows, n_rows = rows
        t_cols, n_cols = cols
        fresh = dst_mask[t_rows, t_cols] == 1
        dst_plane[:, t_rows, t_cols][:, fresh] = src_plane[:, n_rows, n_cols][:, fresh]
        dst_mask[t_rows, t_cols][fresh] = 0

    full_z = (slice(0, Z), slice(0, Z))
    for (ni, nj), ntp in neighbors:
        di, dj = ni - key[0], nj - key[1]
        x_spans = spans(di)
        y_spans = spans(dj)
        copy_strip(known.xy, ntp.xy, mask.xy, x_spans, y_spans)
        if dj == 0:  # east/west neighbor covers the tile's full y extent
            copy_strip(known.xz, ntp.xz, mask.xz, x_spans, full_z)
        if di == 0:  # north/south neighbor covers the tile's full x extent
            copy_strip(known.yz, ntp.yz, mask.yz, y_spans, full_z)
    return inpaint(diffusion, known, mask, seed, resamples=resamples, jump=jump)


def stitch(canvas: SceneCanvas, autoencoder: TriplaneAutoencoder) -> SemanticGrid:
    """Decode every tile and assemble one grid over the canvas bounding box;
    overlap voxels take the earliest-committed tile's labels."""
    dims = canvas.canvas_dims()
    i0, _, j0, _ = canvas.bounds()
    X, Y, Z = canvas.tile_dims
    labels = np.zeros(dims, dtype=np.uint16)
    meta = None
    for key in reversed(canvas.commit_order):
        decoded = autoencoder.decode_grid(canvas.tiles[key])
        if meta is None:
            meta = decoded
        ox = (key[0] - i0) * canvas.stride_voxels
        oy = (key[1] - j0) * canvas.stride_voxels
        labels[ox:ox + X, oy:oy + Y, :] = decoded.labels
    return SemanticGrid(labels=labels, n_classes=meta.n_classes, voxel_size=meta.voxel_size,
                        class_names=meta.class_names, palette=meta.palette.copy())


CANVAS_MANIFEST_VERSION = 1


def save_canvas(canvas: SceneCanvas, directory) -> None:
    """Write the canvas manifest plus one triplane file per tile.

    manifest.json records geometry and the tile paths in commit order, which
    makes stitching deterministic across reloads.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for key in canvas.commit_order:
        tp = canvas.tiles[key]
        name = f"tile_{key[0]}_{key[1]}.npz"
        np.savez(directory / name, xy=tp.xy, xz=tp.xz, yz=tp.yz,
                 scene_dims=np.array(tp.scene_dims))
        entries.append({"i": key[0], "j": key[1], "path": name})
    manifest = {
        "version": CANVAS_MANIFEST_VERSION,
        "tile_dims": list(canvas.tile_dims),
        "plane_channels": canvas.plane_channels,
        "downsample": canvas.downsample,
        "overlap_cells": canvas.overlap_cells,
        "tiles": entries,
    }
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(directory / "manifest.json")


def load_canvas(directory) -> SceneCanvas:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != CANVAS_MANIFEST_VERSION:
        raise ValueError(f"unsupported canvas manifest version {manifest.get('version')}")
    canvas = SceneCanvas(tuple(manifest["tile_dims"]), manifest["plane_channels"],
                         manifest["downsample"], manifest["overlap_cells"])
    for entry in manifest["tiles"]:
        with np.load(directory / entry["path"]) as data:
            tp = Triplane(data["xy"], data["xz"], data["yz"],
                          tuple(int(v) for v in data["scene_dims"]))
        canvas.commit((entry["i"], entry["j"]), tp)
    return canvas


class SscRefiner(BaseEstimator):
    """Conditional triplane diffusion that pulls degraded scene predictions
    toward the learned scene distribution.

    The condition is the degraded scene's triplane, concatenated channel-wise
    to the diffused state; training minimizes the L1 clean-signal loss.
    """

    def __init__(self, autoencoder: TriplaneAutoencoder, timesteps=100, beta_start=None,
                 beta_end=None, base_channels=32, channel_mults=(1, 2, 4), time_dim=64,
                 p_norm=1, epochs=150, batch_size=16, lr=2e-3, seed=0):
        self.autoencoder = autoencoder
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.base_channels = base_channels
        self.channel_mults = channel_mults
        self.time_dim = time_dim
        self.p_norm = p_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _encode_rolled(self, grid: SemanticGrid) -> np.ndarray:
        rolled, layout = roll_triplane(self.autoencoder.encode(grid))
        if hasattr(self, "layout_") and layout != self.layout_:
            raise ValueError("grid geometry does not match the fitted refiner")
        return rolled

    def fit(self, ssc_grids: list[SemanticGrid], gt_grids: list[SemanticGrid]) -> "SscRefiner":
        if not ssc_grids or len(ssc_grids) != len(gt_grids):
            raise ValueError("need matching non-empty ssc/gt scene lists")
        check_is_fitted(self.autoencoder, "encoder_")
        cond_rolled, layout = [], None
        target_rolled = []
        for ssc, gt in zip(ssc_grids, gt_grids):
            rolled, lay = roll_triplane(self.autoencoder.encode(ssc))
            if layout is None:
                layout = lay
            elif lay != layout:
                raise ValueError("all training scenes must share geometry")
            cond_rolled.append(rolled)
            target_rolled.append(roll_triplane(self.autoencoder.encode(gt))[0])
        self.layout_ = layout
        self.scene_dims_ = tuple(gt_grids[0].dims)
        target = torch.from_numpy(np.stack(target_rolled))
        cond = torch.from_numpy(np.stack(cond_rolled))
        self.norm_mean_ = target.mean(dim=(0, 2, 3), keepdim=True)[0]
        self.norm_std_ = target.std(dim=(0, 2, 3), keepdim=True)[0].clamp_min(1e-6)
        target = (target - self.norm_mean_) / self.norm_std_
        cond = (cond - self.norm_mean_) / self.norm_std_

        self.schedule_ = make_schedule(self.timesteps, self.beta_start, self.beta_end)
        torch.manual_seed(self.seed)
        self.denoiser_ = TriplaneUNet(2 * layout.channels, layout.channels,
                                      self.base_channels, tuple(self.channel_mults),
                                      self.time_dim)
        opt = torch.optim.Adam(self.denoiser_.parameters(), lr=self.lr)
        gen = torch.Generator().manual_seed(self.seed)
        order_rng = np.random.default_rng(self.seed)
        ab = torch.from_numpy(self.schedule_.alpha_bar).float()
        self.loss_log_ = []
        step = 0
        for _ in range(self.epochs):
            order = order_rng.permutation(len(ssc_grids))
            epoch_losses = []
            for start in range(0, len(ssc_grids), self.batch_size):
                idx = order[start:start + self.batch_size]
                cond_b = cond[idx]
                target_b = target[idx]
                b = cond_b.shape[0]
                t = torch.randint(1, self.schedule_.T + 1, (b,), generator=gen)
                noise = torch.randn(cond_b.shape, generator=gen)
                ab_t = ab[t - 1].view(b, 1, 1, 1)
                diffused_cond = ab_t.sqrt() * cond_b + (1 - ab_t).sqrt() * noise
                pred = self.denoiser_(torch.cat([diffused_cond, cond_b], dim=1), t)
                residual = target_b - pred
                loss = residual.abs().mean() if self.p_norm == 1 else residual.pow(2).mean()
                loss_value = float(loss.detach())
                if not np.isfinite(loss_value):
                    raise TrainingDivergedError(step, loss_value)
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_losses.append(loss_value)
                step += 1
            self.loss_log_.append(float(np.mean(epoch_losses)))
        self.denoiser_.eval()
        return self

    def refine(self, ssc_grid: SemanticGrid, seed: int = 0) -> SemanticGrid:
        """Denoise from the fully diffused condition, conditioning every step
        on the clean condition triplane; decode at the input resolution."""
        check_is_fitted(self, "denoiser_")
        rolled = self._encode_rolled(ssc_grid)
        cond = ((torch.from_numpy(rolled) - self.norm_mean_) / self.norm_std_)
        schedule = self.schedule_
        generator = torch.Generator().manual_seed(seed)
        state = q_sample(cond, schedule.T, torch.randn(cond.shape, generator=generator),
                         schedule)
        with torch.no_grad():
            for t in range(schedule.T, 0, -1):
                stacked = torch.cat([state, cond], dim=0).unsqueeze(0)
                pred = self.denoiser_(stacked, torch.tensor([t])).squeeze(0)
                noise = torch.randn(cond.shape, generator=generator) if t > 1 else None
                state = posterior_step(state, pred, t, noise, schedule)
        out = (state * self.norm_std_ + self.norm_mean_).numpy()
        tp = unroll_triplane(out, self.layout_, ssc_grid.dims)
        return self.autoencoder.decode_grid(tp, ssc_grid.dims)

    def predict(self, ssc_grids: list[SemanticGrid], seed: int = 0) -> list[SemanticGrid]:
        return [self.refine(g, derive_seed(seed, f"refine/{i}"))
                for i, g in enumerate(ssc_grids)]
