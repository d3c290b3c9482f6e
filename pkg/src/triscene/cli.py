"""Command-line pipeline: data generation, training, generation, manipulation
and evaluation. Every command is deterministic given its config echo + seed.

Exit codes: 0 success, 2 usage/config error, 3 missing input or checkpoint,
4 malformed file, 5 geometry/shape mismatch, 6 training diverged.
"""

from __future__ import annotations

import functools
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .checkpoint import (load_autoencoder, load_diffusion, load_refiner, save_autoencoder,
                         save_diffusion, save_refiner)
from .codec import TriplaneAutoencoder
from .config import ConfigError, RunConfig, load_config, write_echo
from .diffusion import TriplaneDiffusion
from .exceptions import CheckpointFormatError, SceneFormatError, TrainingDivergedError
from .manipulation import (BoxRegion, SceneCanvas, SscRefiner, inpaint, load_canvas,
                           outpaint, save_canvas, stitch, trimask_from_boxes)
from .metrics import completion_iou, miou, write_metric_report
from .scenes import corrupt_scene, generate_toy_scene, load_scene, render_topdown, save_scene
from .seeds import derive_seed

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_GEOMETRY = 5
EXIT_DIVERGED = 6


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as err:
            _fail(EXIT_CONFIG, str(err))
        except FileNotFoundError as err:
            _fail(EXIT_MISSING, str(err))
        except (SceneFormatError, CheckpointFormatError) as err:
            _fail(EXIT_FORMAT, str(err))
        except TrainingDivergedError as err:
            _fail(EXIT_DIVERGED, str(err))
        except ValueError as err:
            _fail(EXIT_GEOMETRY, str(err))
    return wrapper


def _load_cfg(config_path, root, seed) -> RunConfig:
    cfg = load_config(config_path)
    if root:
        cfg.output.root = str(root)
    if seed is not None:
        cfg.seed = seed
    return cfg


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path} (run the producing command first)")
    return path


def _scene_dir(cfg: RunConfig, split: str) -> Path:
    return cfg.resolved_root() / "scenes" / split


def _ckpt(cfg: RunConfig, name: str) -> Path:
    return cfg.resolved_root() / "checkpoints" / f"{name}.ckpt"


def _load_split(cfg: RunConfig, split: str) -> list:
    directory = _require(_scene_dir(cfg, split), f"{split} scene directory")
    files = sorted(directory.glob("*.semc"))
    if not files:
        raise FileNotFoundError(f"no .semc scenes in {directory}")
    return [load_scene(f) for f in files]


def _save_png(grid, path: Path) -> None:
    Image.fromarray(render_topdown(grid)).save(path)


_config_option = click.option("--config", "config_path", type=click.Path(exists=True),
                              default=None, help="TOML run configuration.")
_root_option = click.option("--root", type=click.Path(), default=None,
                            help="Output root (defaults to $SEMCITY_HOME or ./semcity_out).")
_seed_option = click.option("--seed", type=int, default=None, help="Global seed override.")


@click.group()
def main():
    """Semantic scene generation pipeline (triplane autoencoder + diffusion).

    The output root defaults to $SEMCITY_HOME or ./semcity_out; override with
    --root. Exit codes: 0 success, 2 usage/config error, 3 missing input or
    checkpoint, 4 malformed file, 5 geometry mismatch, 6 training diverged.
    """


@main.command("gen-data")
@_config_option
@_root_option
@_seed_option
@click.option("--count", type=int, default=None, help="Training scene count override.")
@_guarded
def gen_data(config_path, root, seed, count):
    """Generate deterministic toy scene splits as SEMC1 files."""
    cfg = _load_cfg(config_path, root, seed)
    if count is not None:
        cfg.data.count = count
    for split, n in (("train", cfg.data.count), ("val", cfg.data.val_count)):
        out = _scene_dir(cfg, split)
        out.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            scene_seed = derive_seed(cfg.seed, f"data/{split}/{i}")
            grid = generate_toy_scene(scene_seed, cfg.data.dims, cfg.data.n_classes)
            save_scene(grid, out / f"scene_{i:04d}.semc")
        click.echo(f"wrote {n} scenes to {out}")
    write_echo(cfg, cfg.resolved_root() / "scenes" / "gen-data.config.toml")


@main.command("train-ae")
@_config_option
@_root_option
@_seed_option
@click.option("--epochs", type=int, default=None)
@_guarded
def train_ae(config_path, root, seed, epochs):
    """Train the triplane autoencoder on the train split."""
    cfg = _load_cfg(config_path, root, seed)
    if epochs is not None:
        cfg.autoencoder.epochs = epochs
    grids = _load_split(cfg, "train")
    a = cfg.autoencoder
    ae = TriplaneAutoencoder(
        plane_channels=a.plane_channels, downsample=a.downsample,
        encoder_channels=a.encoder_channels, mlp_width=a.mlp_width,
        pe_octaves=a.pe_octaves, lovasz_weight=a.lovasz_weight, epochs=a.epochs,
        batch_size=a.batch_size, points_per_scene=a.points_per_scene, lr=a.lr,
        seed=derive_seed(cfg.seed, "train-ae"))
    ae.fit(grids)
    out = _ckpt(cfg, "autoencoder")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_autoencoder(ae, out)
    write_echo(cfg, out.parent / "train-ae.config.toml")
    click.echo(f"autoencoder checkpoint: {out} "
               f"(loss {ae.loss_log_[0]:.4f} -> {ae.loss_log_[-1]:.4f})")


@main.command("train-diffusion")
@_config_option
@_root_option
@_seed_option
@click.option("--epochs", type=int, default=None)
@_guarded
def train_diffusion(config_path, root, seed, epochs):
    """Train the triplane diffusion model on autoencoded train scenes."""
    cfg = _load_cfg(config_path, root, seed)
    if epochs is not None:
        cfg.diffusion.epochs = epochs
    ae = load_autoencoder(_require(_ckpt(cfg, "autoencoder"), "autoencoder checkpoint"))
    grids = _load_split(cfg, "train")
    d = cfg.diffusion
    model = TriplaneDiffusion(
        timesteps=d.timesteps, base_channels=d.base_channels,
        channel_mults=d.channel_mults, p_norm=d.p_norm, epochs=d.epochs,
        batch_size=d.batch_size, lr=d.lr, lr_decay=d.lr_decay,
        seed=derive_seed(cfg.seed, "train-diffusion"))
    model.fit(ae.transform(grids))
    out = _ckpt(cfg, "diffusion")
    save_diffusion(model, out)
    write_echo(cfg, out.parent / "train-diffusion.config.toml")
    click.echo(f"diffusion checkpoint: {out} "
               f"(loss {model.loss_log_[0]:.4f} -> {model.loss_log_[-1]:.4f})")


@main.command("train-refiner")
@_config_option
@_root_option
@_seed_option
@click.option("--epochs", type=int, default=None)
@_guarded
def train_refiner(config_path, root, seed, epochs):
    """Train the conditional refiner on corrupted/clean scene pairs."""
    cfg = _load_cfg(config_path, root, seed)
    if epochs is not None:
        cfg.refinement.epochs = epochs
    ae = load_autoencoder(_require(_ckpt(cfg, "autoencoder"), "autoencoder checkpoint"))
    grids = _load_split(cfg, "train")
    r = cfg.refinement
    ssc, gt = [], []
    for i, g in enumerate(grids):
        for k in range(r.pairs_per_scene):
            ssc.append(corrupt_scene(g, r.severity, derive_seed(cfg.seed, f"corrupt/{i}/{k}")))
            gt.append(g)
    refiner = SscRefiner(autoencoder=ae, epochs=r.epochs, batch_size=r.batch_size,
                         lr=r.lr, timesteps=cfg.diffusion.timesteps,
                         seed=derive_seed(cfg.seed, "train-refiner"))
    refiner.fit(ssc, gt)
    out = _ckpt(cfg, "refiner")
    save_refiner(refiner, out)
    write_echo(cfg, out.parent / "train-refiner.config.toml")
    click.echo(f"refiner checkpoint: {out} "
               f"(loss {refiner.loss_log_[0]:.4f} -> {refiner.loss_log_[-1]:.4f})")


@main.command("generate")
@_config_option
@_root_option
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--count", type=int, default=1, show_default=True)
@click.option("--png/--no-png", default=True, show_default=True)
@_guarded
def generate(config_path, root, seed, count, png):
    """Sample new scenes from the trained diffusion model."""
    cfg = _load_cfg(config_path, root, None)
    ae = load_autoencoder(_require(_ckpt(cfg, "autoencoder"), "autoencoder checkpoint"))
    model = load_diffusion(_require(_ckpt(cfg, "diffusion"), "diffusion checkpoint"))
    out = cfg.resolved_root() / "samples"
    out.mkdir(parents=True, exist_ok=True)
    for i, tp in enumerate(model.sample(n=count, seed=seed)):
        grid = ae.decode_grid(tp)
        save_scene(grid, out / f"sample_{seed}_{i:03d}.semc")
        if png:
            _save_png(grid, out / f"sample_{seed}_{i:03d}.png")
    write_echo(cfg, out / "generate.config.toml")
    click.echo(f"wrote {count} samples to {out}")


def _parse_box(text: str) -> BoxRegion:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 6:
        raise ConfigError(f"--box expects x0,x1,y0,y1,z0,z1 , got {text!r}")
    return BoxRegion(*parts)


@main.command("inpaint")
@_config_option
@_root_option
@click.option("--scene", "scene_path", type=click.Path(), required=True,
              help="SEMC1 scene to edit.")
@click.option("--box", "boxes", multiple=True, required=True,
              help="Voxel box x0,x1,y0,y1,z0,z1 to regenerate; repeatable.")
@click.option("--seed", type=int, default=0, show_default=True)
@_guarded
def inpaint_cmd(config_path, root, scene_path, boxes, seed):
    """Regenerate boxed scene regions, preserving everything else."""
    cfg = _load_cfg(config_path, root, None)
    ae = load_autoencoder(_require(_ckpt(cfg, "autoencoder"), "autoencoder checkpoint"))
    model = load_diffusion(_require(_ckpt(cfg, "diffusion"), "diffusion checkpoint"))
    grid = load_scene(_require(Path(scene_path), "scene"))
    mask = trimask_from_boxes([_parse_box(b) for b in boxes], grid.dims, ae.downsample)
    tp = ae.encode(grid)
    edited = inpaint(model, tp, mask, seed,
                     resamples=cfg.repaint.resamples, jump=cfg.repaint.jump)
    out = cfg.resolved_root() / "edits"
    out.mkdir(parents=True, exist_ok=True)
    result = ae.decode_grid(edited)
    save_scene(result, out / f"inpaint_{seed}.semc")
    _save_png(result, out / f"inpaint_{seed}.png")
    write_echo(cfg, out / "inpaint.config.toml")
    click.echo(f"wrote {out / f'inpaint_{seed}.semc'}")


@main.command("outpaint")
@_config_option
@_root_option
@click.option("--canvas", "canvas_dir", type=click.Path(), default=None,
              help="Canvas directory (default <root>/canvas).")
@click.option("--init", "init_scene", type=click.Path(), default=None,
              help="SEMC1 scene committed as tile (0,0) when the canvas is new.")
@click.option("--tile", default=None, help="Tile to outpaint as 'i,j'.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--export", "export_path", type=click.Path(), default=None,
              help="Stitch the canvas into one SEMC1 file.")
@_guarded
def outpaint_cmd(config_path, root, canvas_dir, init_scene, tile, seed, export_path):
    """Grow a tiled canvas by outpainting; proposals are auto-committed."""
    cfg = _load_cfg(config_path, root, None)
    ae = load_autoencoder(_require(_ckpt(cfg, "autoencoder"), "autoencoder checkpoint"))
    model = load_diffusion(_require(_ckpt(cfg, "diffusion"), "diffusion checkpoint"))
    canvas_dir = Path(canvas_dir) if canvas_dir else cfg.resolved_root() / "canvas"
    if (canvas_dir / "manifest.json").exists():
        canvas = load_canvas(canvas_dir)
    else:
        canvas = SceneCanvas(model.scene_dims_, model.layout_.channels, ae.downsample)
        if init_scene is None:
            raise ConfigError("new canvas: pass --init SCENE to seed tile (0,0)")
        canvas.commit((0, 0), ae.encode(load_scene(_require(Path(init_scene), "scene"))))
    if tile is not None:
        i, j = (int(v) for v in tile.split(","))
        proposal = outpaint(model, canvas, (i, j), seed,
                            resamples=cfg.repaint.resamples, jump=cfg.repaint.jump)
        canvas.commit((i, j), proposal)
        click.echo(f"committed tile ({i}, {j})")
    save_canvas(canvas, canvas_dir)
    if export_path:
        grid = stitch(canvas, ae)
        save_scene(grid, export_path)
        click.echo(f"stitched {grid.dims} canvas to {export_path}")
    write_echo(cfg, canvas_dir / "outpaint.config.toml")


@main.command("refine")
@_config_option
@_root_option
@click.option("--scene", "scene_path", type=click.Path(), required=True,
              help="Degraded SEMC1 scene to refine.")
@click.option("--seed", type=int, default=0, show_default=True)
@_guarded
def refine_cmd(config_path, root, scene_path, seed):
    """Refine a degraded scene-completion prediction."""
    cfg = _load_cfg(config_path, root, None)
    ae = load_autoencoder(_require(_ckpt(cfg, "autoencoder"), "autoencoder checkpoint"))
    refiner = load_refiner(_require(_ckpt(cfg, "refiner"), "refiner checkpoint"), ae)
    grid = load_scene(_require(Path(scene_path), "scene"))
    refined = refiner.refine(grid, seed)
    out = cfg.resolved_root() / "edits"
    out.mkdir(parents=True, exist_ok=True)
    save_scene(refined, out / f"refined_{seed}.semc")
    _save_png(refined, out / f"refined_{seed}.png")
    write_echo(cfg, out / "refine.config.toml")
    click.echo(f"wrote {out / f'refined_{seed}.semc'}")


@main.command("eval")
@_config_option
@_root_option
@click.option("--split", type=click.Choice(["train", "val"]), default="train",
              show_default=True)
@_guarded
def eval_cmd(config_path, root, split):
    """Autoencoder reconstruction metrics on a scene split."""
    cfg = _load_cfg(config_path, root, None)
    ae = load_autoencoder(_require(_ckpt(cfg, "autoencoder"), "autoencoder checkpoint"))
    grids = _load_split(cfg, split)
    records = []
    mious, cious = [], []
    for i, g in enumerate(grids):
        recon = ae.reconstruct(g)
        m, c = miou(recon, g), completion_iou(recon, g)
        mious.append(m)
        cious.append(c)
        records.append({"metric": "reconstruction_miou", "value": m, "scene_id": f"{split}/{i}"})
        records.append({"metric": "completion_iou", "value": c, "scene_id": f"{split}/{i}"})
    records.append({"metric": "mean_reconstruction_miou", "value": float(np.mean(mious)),
                    "scene_id": f"{split}/*"})
    records.append({"metric": "mean_completion_iou", "value": float(np.mean(cious)),
                    "scene_id": f"{split}/*"})
    out = cfg.resolved_root() / "reports"
    out.mkdir(parents=True, exist_ok=True)
    report = out / f"eval-{split}.jsonl"
    write_metric_report(report, records)
    write_echo(cfg, out / "eval.config.toml")
    click.echo(f"mean mIoU {np.mean(mious):.4f}, mean completion IoU {np.mean(cious):.4f} "
               f"-> {report}")


@main.command("export-views")
@_config_option
@_root_option
@click.option("--scenes", "scenes_dir", type=click.Path(), default=None,
              help="Directory of SEMC1 files (default <root>/samples).")
@_guarded
def export_views(config_path, root, scenes_dir):
    """Render top-down PNG views for every scene in a directory."""
    cfg = _load_cfg(config_path, root, None)
    directory = Path(scenes_dir) if scenes_dir else cfg.resolved_root() / "samples"
    files = sorted(_require(directory, "scene directory").glob("*.semc"))
    if not files:
        raise FileNotFoundError(f"no .semc scenes in {directory}")
    for f in files:
        _save_png(load_scene(f), f.with_suffix(".png"))
    click.echo(f"rendered {len(files)} views in {directory}")


@main.command("serve")
@_root_option
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8765, show_default=True)
@_guarded
def serve(root, host, port):
    """Run the interactive session service over the trained checkpoints."""
    import uvicorn

    from .service import create_app

    cfg = _load_cfg(None, root, None)
    app = create_app(cfg.resolved_root())
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
