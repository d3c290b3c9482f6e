"""Versioned checkpoint container shared by all trained models.

Layout (little-endian):
  magic   b"SEMCKPT1" (8 bytes)
  u32     JSON header length
  header  UTF-8 JSON: {"version": 1, "kind": ..., "config": {...},
          "extras": {...}, "arrays": [{"name", "shape", "dtype": "f4"}]}
  payload raw float32 array data, concatenated in header order

Array names are the torch state-dict keys of the module(s) plus any
normalization statistics, so an independent implementation can reproduce the
parameterization from the README's documented name list.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .exceptions import CheckpointFormatError

_MAGIC = b"SEMCKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, arrays: dict[str, np.ndarray],
                    extras: dict | None = None) -> None:
    names = list(arrays)
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "extras": extras or {},
        "arrays": [{"name": n, "shape": list(arrays[n].shape), "dtype": "f4"}
                   for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for n in names:
        buf.write(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic {data[:8]!r}")
    (hlen,) = struct.unpack_from("<I", data, 8)
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointFormatError(f"unreadable checkpoint header: {err}") from err
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {header.get('version')}")
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise CheckpointFormatError(
            f"checkpoint kind {header.get('kind')!r}, expected {expect_kind!r}")
    arrays = {}
    pos = 12 + hlen
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * 4
        if pos + nbytes > len(data):
            raise CheckpointFormatError(f"truncated payload for array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(
            data, dtype="<f4", count=count, offset=pos).reshape(spec["shape"]).copy()
        pos += nbytes
    return header, arrays


def state_dict_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().numpy() for k, v in module.state_dict().items()}


def load_state_dict_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray],
                           prefix: str = "") -> None:
    state = {k[len(prefix):]: torch.from_numpy(v.copy())
             for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state)


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def save_autoencoder(est, path) -> None:
    from sklearn.utils.validation import check_is_fitted
    check_is_fitted(est, "encoder_")
    arrays = {"class_weights": est.class_weights_.weights.astype(np.float32)}
    arrays.update(state_dict_arrays(est.encoder_, "encoder."))
    arrays.update(state_dict_arrays(est.decoder_, "decoder."))
    extras = {
        "n_classes": est.n_classes_,
        "class_names": list(est.class_names_),
        "palette": est.palette_.tolist(),
        "scene_dims": list(est.scene_dims_),
        "voxel_size": est.voxel_size_,
        "loss_log": getattr(est, "loss_log_", []),
    }
    save_checkpoint(path, "autoencoder", _jsonable(est.get_params(deep=False)), arrays, extras)


def load_autoencoder(path):
    from .codec import ImplicitDecoder, SceneEncoder, TriplaneAutoencoder
    from .scenes import ClassWeights
    header, arrays = load_checkpoint(path, expect_kind="autoencoder")
    est = TriplaneAutoencoder(**header["config"])
    ex = header["extras"]
    est.n_classes_ = ex["n_classes"]
    est.class_names_ = tuple(ex["class_names"])
    est.palette_ = np.array(ex["palette"], dtype=np.uint8)
    est.scene_dims_ = tuple(ex["scene_dims"])
    est.voxel_size_ = ex["voxel_size"]
    est.loss_log_ = ex.get("loss_log", [])
    est.class_weights_ = ClassWeights(arrays["class_weights"].astype(np.float64))
    est.encoder_ = SceneEncoder(est.n_classes_, est.plane_channels,
                                tuple(est.encoder_channels), est.downsample)
    est.decoder_ = ImplicitDecoder(est.plane_channels, est.n_classes_,
                                   est.mlp_width, est.pe_octaves)
    load_state_dict_arrays(est.encoder_, arrays, "encoder.")
    load_state_dict_arrays(est.decoder_, arrays, "decoder.")
    est.encoder_.eval()
    est.decoder_.eval()
    return est


def _save_denoising(est, path, kind: str, skip_params=()) -> None:
    from sklearn.utils.validation import check_is_fitted
    check_is_fitted(est, "denoiser_")
    arrays = {
        "norm_mean": est.norm_mean_.numpy(),
        "norm_std": est.norm_std_.numpy(),
    }
    arrays.update(state_dict_arrays(est.denoiser_, "denoiser."))
    lay = est.layout_
    extras = {
        "scene_dims": list(est.scene_dims_),
        "layout": {"channels": lay.channels, "xh": lay.xh, "yh": lay.yh, "zh": lay.zh},
        "schedule": {"T": est.schedule_.T,
                     "beta_start": float(est.schedule_.beta[0]),
                     "beta_end": float(est.schedule_.beta[-1])},
        "loss_log": getattr(est, "loss_log_", []),
    }
    params = {k: v for k, v in est.get_params(deep=False).items() if k not in skip_params}
    save_checkpoint(path, kind, _jsonable(params), arrays, extras)


def _load_denoising(est, header, arrays, in_channels_factor: int):
    from .diffusion import RollLayout, TriplaneUNet, make_schedule
    ex = header["extras"]
    est.scene_dims_ = tuple(ex["scene_dims"])
    est.layout_ = RollLayout(**ex["layout"])
    sched = ex["schedule"]
    est.schedule_ = make_schedule(sched["T"], sched["beta_start"], sched["beta_end"])
    est.norm_mean_ = torch.from_numpy(arrays["norm_mean"].copy())
    est.norm_std_ = torch.from_numpy(arrays["norm_std"].copy())
    est.loss_log_ = ex.get("loss_log", [])
    c = est.layout_.channels
    est.denoiser_ = TriplaneUNet(in_channels_factor * c, c, est.base_channels,
                                 tuple(est.channel_mults), est.time_dim)
    load_state_dict_arrays(est.denoiser_, arrays, "denoiser.")
    est.denoiser_.eval()
    return est


def save_diffusion(est, path) -> None:
    _save_denoising(est, path, "diffusion")


def load_diffusion(path):
    from .diffusion import TriplaneDiffusion
    header, arrays = load_checkpoint(path, expect_kind="diffusion")
    est = TriplaneDiffusion(**header["config"])
    return _load_denoising(est, header, arrays, in_channels_factor=1)


def save_refiner(est, path) -> None:
    _save_denoising(est, path, "refiner", skip_params=("autoencoder",))


def load_refiner(path, autoencoder):
    from .manipulation import SscRefiner
    header, arrays = load_checkpoint(path, expect_kind="refiner")
    est = SscRefiner(autoencoder=autoencoder, **header["config"])
    return _load_denoising(est, header, arrays, in_channels_factor=2)
