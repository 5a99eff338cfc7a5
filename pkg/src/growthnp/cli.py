"""Command-line entry point: generate, train, evaluate, sample and plot."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import data as data_mod
from .config import ConfigError, RunConfig, environment_info, load_config, save_config
from .evaluation import (
    DEFAULT_THRESHOLDS,
    evaluate_all,
    mean_prediction,
    read_curve_csv,
    write_report,
)
from .model import observations_to_tensors
from .plotting import plot_loss_curves, plot_sample_panel, plot_threshold_curve
from .training import CheckpointError, load_checkpoint, read_loss_log, train

logger = logging.getLogger("growthnp")

_config_options = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path)),
    click.option("--preset", default="desk", show_default=True, help="Base preset: desk or full."),
    click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE", help="Override one config value."),
]


def config_options(f):
    for opt in reversed(_config_options):
        f = opt(f)
    return f


def _load(config_path, preset, overrides) -> RunConfig:
    try:
        return load_config(config_path, preset, tuple(overrides))
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc


def _fresh_dir(path: Path) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        raise click.ClickException(f"output directory {path} is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_info(out: Path, cfg: RunConfig, **extra) -> None:
    save_config(cfg, out / "config.yaml")
    info = {"environment": environment_info(), **extra}
    (out / "run_info.json").write_text(json.dumps(info, indent=2, default=str))


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool):
    """Continuous-time growth Neural Process: data, training and evaluation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command("init-config")
@click.argument("out", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--preset", default="desk", show_default=True)
def init_config(out: Path, preset: str):
    """Write a complete config file for a preset."""
    try:
        save_config(RunConfig.preset(preset), out)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"wrote {out}")


@main.command()
@config_options
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
def generate(config_path, preset, overrides, out_dir):
    """Simulate a synthetic corpus and write it with its train/test split."""
    cfg = _load(config_path, preset, overrides)
    out = _fresh_dir(out_dir)
    d = cfg.data
    train_set, test_set = data_mod.build_corpus(d.n_subjects, d.seed, d.split_fraction, d.image_size)
    data_mod.save_corpus(out, train_set, test_set, meta={"seed": d.seed, "split_fraction": d.split_fraction})
    _write_info(out, cfg, command="generate")
    click.echo(f"wrote {len(train_set)} train and {len(test_set)} test subjects to {out}")


@main.command("train")
@config_options
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--resume", is_flag=True, help="Continue from OUT/checkpoints/last.pt.")
def train_cmd(config_path, preset, overrides, data_dir, out_dir, resume):
    """Train a model on the training side of a corpus."""
    cfg = _load(config_path, preset, overrides)
    resume_ckpt = None
    if resume:
        try:
            resume_ckpt = load_checkpoint(Path(out_dir) / "checkpoints" / "last.pt", cfg.model)
        except (FileNotFoundError, CheckpointError) as exc:
            raise click.ClickException(str(exc)) from exc
        out = Path(out_dir)
    else:
        out = _fresh_dir(out_dir)
    manifest = data_mod.load_split_manifest(data_dir)
    train_set = data_mod.load_corpus(data_dir, "train")
    _write_info(out, cfg, command="train", data=str(data_dir), train_subjects=manifest["train"])

    def report(row):
        click.echo(
            f"epoch {row['epoch']:4d}  total {row['total']:.4f}  ce {row['ce']:.4f}  "
            f"dice {row['dice']:.4f}  kl {row['kl']:.2f}"
        )

    train(
        train_set,
        cfg.model,
        cfg.train,
        cfg.loss,
        run_dir=out,
        resume=resume_ckpt,
        forbidden_subjects=manifest["test"],
        on_epoch=report,
    )
    plot_loss_curves(read_loss_log(out / "loss_log.csv"), out / "loss_curves.png")
    click.echo(f"checkpoint: {out / 'checkpoints' / 'last.pt'}")


def _checkpoint(path: Path):
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, CheckpointError) as exc:
        raise click.ClickException(str(exc)) from exc


@main.command()
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(path_type=Path))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--seed", default=0, show_default=True)
@click.option("--n-samples", default=100, show_default=True)
def evaluate(ckpt_path, data_dir, out_dir, seed, n_samples):
    """Compute test loss, surprise, query-volume Dice and the threshold curve."""
    ckpt = _checkpoint(ckpt_path)
    out = _fresh_dir(out_dir)
    model = ckpt.build_model()
    test_set = data_mod.load_corpus(data_dir, "test")
    report = evaluate_all(model, test_set, seed=seed, n_samples=n_samples, loss_config=ckpt.loss_config)
    report.meta["checkpoint"] = str(ckpt_path)
    report.meta["use_attention_skips"] = ckpt.model_config.use_attention_skips
    paths = write_report(report, out)
    plot_threshold_curve({_label(ckpt): report.curve}, out / "threshold_curve.png")
    (out / "run_info.json").write_text(
        json.dumps({"environment": environment_info(), "command": "evaluate", "seed": seed,
                    "n_samples": n_samples, "checkpoint": str(ckpt_path), "data": str(data_dir)}, indent=2)
    )
    for m, (mu, sem) in report.aggregates.items():
        click.echo(f"{m:>18s}: {mu:.4f} +- {sem:.4f}")
    click.echo(f"wrote {', '.join(str(p) for p in paths.values())}")


def _label(ckpt) -> str:
    return "attention NP" if ckpt.model_config.use_attention_skips else "vanilla NP"


@main.command()
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(path_type=Path))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--subject", required=True)
@click.option("--times", "query_times", default=None, help="Comma-separated query times; default: all observed times.")
@click.option("--num-context", default=2, show_default=True)
@click.option("--n-samples", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
def sample(ckpt_path, data_dir, subject, query_times, num_context, n_samples, seed, out_dir):
    """Draw latent trajectories for one subject and render a panel."""
    ckpt = _checkpoint(ckpt_path)
    out = _fresh_dir(out_dir)
    npz = Path(data_dir) / f"{subject}.npz"
    if not npz.exists():
        raise click.ClickException(f"subject {subject!r} not found in {data_dir}")
    traj = data_mod.load_trajectory(npz)
    if not 1 <= num_context < len(traj):
        raise click.ClickException(f"num-context must lie in [1, {len(traj) - 1}] for {subject}")
    context = traj.observations[:num_context]
    if query_times:
        try:
            times = [float(t) for t in query_times.split(",")]
        except ValueError as exc:
            raise click.ClickException(f"could not parse --times {query_times!r}") from exc
    else:
        times = [o.time for o in traj.observations]
    model = ckpt.build_model()
    ci, cs, ct = observations_to_tensors(context)
    tq = torch.tensor([times], dtype=ct.dtype)
    gen = torch.Generator().manual_seed(seed)
    samples = np.stack(
        [model.sample_trajectory(ci, cs, ct, tq, generator=gen)[0].argmax(1).numpy() for _ in range(n_samples)]
    )
    mean = mean_prediction(model, context, times)
    np.savez(out / "predictions.npz", query_times=np.array(times), mean=mean, samples=samples)
    truth = {o.time: o.segmentation for o in traj.observations if o.time in times}
    plot_sample_panel(
        np.stack([o.image for o in context]),
        np.stack([o.segmentation for o in context]),
        [o.time for o in context],
        times,
        mean,
        samples,
        out / "samples.png",
        truth=truth,
    )
    (out / "run_info.json").write_text(
        json.dumps({"environment": environment_info(), "command": "sample", "subject": subject,
                    "seed": seed, "query_times": times, "checkpoint": str(ckpt_path)}, indent=2)
    )
    click.echo(f"wrote {out / 'predictions.npz'} and {out / 'samples.png'}")


@main.command()
@click.argument("report_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), help="Training run with loss_log.csv.")
@click.option("--compare", multiple=True, metavar="LABEL=REPORT_DIR", help="Extra report to overlay.")
@click.option("--min-cases", default=1, show_default=True)
def plot(report_dir, run_dir, compare, min_cases):
    """Render threshold curves (and loss curves) into REPORT_DIR."""
    curve_path = report_dir / "threshold_curve.csv"
    if not curve_path.exists():
        raise click.ClickException(f"{curve_path} not found; run evaluate first")
    curves = {"model": read_curve_csv(curve_path)}
    for item in compare:
        if "=" not in item:
            raise click.ClickException(f"--compare expects LABEL=REPORT_DIR, got {item!r}")
        label, path = item.split("=", 1)
        other = Path(path) / "threshold_curve.csv"
        if not other.exists():
            raise click.ClickException(f"{other} not found")
        curves[label] = read_curve_csv(other)
    written = [plot_threshold_curve(curves, report_dir / "threshold_curve.png", min_cases)]
    if run_dir is not None:
        log = run_dir / "loss_log.csv"
        if not log.exists():
            raise click.ClickException(f"{log} not found")
        written.append(plot_loss_curves(read_loss_log(log), report_dir / "loss_curves.png"))
    click.echo("wrote " + ", ".join(str(p) for p in written))


if __name__ == "__main__":
    sys.exit(main())
