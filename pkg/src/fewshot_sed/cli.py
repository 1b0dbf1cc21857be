"""Command-line interface: dataset synthesis, training, evaluation, plots."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import click
import yaml

from . import synthesis
from .models import VARIANTS, ModelConfig, build_model
from .synthesis import Corpora, SynthConfig
from .training import LossConfig, OptimConfig, default_learning_rate, fit


def _load_yaml(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        return yaml.safe_load(f) or {}


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose):
    """Few-shot sound event detection toolkit."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), help="YAML synthesis config.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--corpus", "corpus_root", type=click.Path(exists=True), help="Event corpus root.")
@click.option("--layout", default="flat", type=click.Choice(["flat", "esc50", "voxceleb"]))
@click.option("--backgrounds", "bg_root", type=click.Path(exists=True), help="Background WAV directory.")
@click.option("--procedural", is_flag=True, help="Use the built-in procedural corpus.")
@click.option("--procedural-classes", default=12, show_default=True)
@click.option("--procedural-clips", default=12, show_default=True)
@click.option("--procedural-backgrounds", "proc_bgs", default=24, show_default=True)
@click.option("--seed", default=0, show_default=True)
def synth(config_path, out_dir, corpus_root, layout, bg_root, procedural, procedural_classes, procedural_clips, proc_bgs, seed):
    """Generate an episodic dataset (WAV tree + manifest.json)."""
    raw = _load_yaml(config_path)
    cfg = SynthConfig.from_dict({**SynthConfig().to_dict(), **raw})
    if procedural:
        events = synthesis.procedural_corpus(procedural_classes, procedural_clips, seed)
        backgrounds = synthesis.procedural_backgrounds(proc_bgs, seed)
    elif corpus_root:
        if bg_root is None:
            raise click.UsageError("--backgrounds is required with --corpus")
        events = synthesis.ingest_corpus(corpus_root, layout)
        bg_clips = synthesis.ingest_corpus(bg_root, "flat")
        backgrounds = [(c.origin, c.audio) for c in bg_clips]
    else:
        raise click.UsageError("pass either --corpus or --procedural")
    corpora = Corpora(events=events, backgrounds=backgrounds)
    manifest = synthesis.generate_dataset(cfg, corpora, seed, out_dir)
    total = sum(len(s["episodes"]) for s in manifest["splits"].values())
    click.echo(f"wrote {total} episodes to {out_dir}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), help="YAML model/optimizer config.")
@click.option("--data", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--model", "variant", type=click.Choice(VARIANTS), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--max-steps", type=int, default=None, help="Optional hard step limit.")
def train(config_path, manifest_path, variant, out_dir, seed, max_steps):
    """Train one model variant on a synthesized dataset."""
    raw = _load_yaml(config_path)
    model_cfg = ModelConfig.from_dict({**ModelConfig(variant=variant).to_dict(), **raw.get("model", {}), "variant": variant})
    optim_raw = dict(raw.get("optim", {}))
    optim_raw.setdefault("learning_rate", default_learning_rate(variant))
    if max_steps is not None:
        optim_raw["max_steps"] = max_steps
    optim_cfg = OptimConfig(**optim_raw)
    loss_cfg = LossConfig(**raw.get("loss", {}))
    manifest = synthesis.load_manifest(manifest_path)
    model = build_model(model_cfg)
    best = fit(
        model,
        manifest,
        Path(manifest_path).parent,
        optim_cfg,
        loss_cfg,
        seed,
        out_dir,
        model_cfg=model_cfg,
    )
    click.echo(f"best checkpoint: {best}")


@main.command("eval")
@click.option("--checkpoint", "ckpt_dir", type=click.Path(exists=True), required=True)
@click.option("--data", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--split", default="test", show_default=True, type=click.Choice(["train", "val", "test"]))
@click.option("--out", "report_path", type=click.Path(), required=True)
@click.option("--max-episodes", type=int, default=None)
@click.option("--dump-detections", "dump_path", type=click.Path(), default=None)
def eval_cmd(ckpt_dir, manifest_path, split, report_path, max_episodes, dump_path):
    """Evaluate a checkpoint; writes a JSON metrics report."""
    from .evaluation import evaluate

    manifest = synthesis.load_manifest(manifest_path)
    report = evaluate(
        ckpt_dir,
        manifest,
        Path(manifest_path).parent,
        split=split,
        max_episodes=max_episodes,
        dump_detections_path=dump_path,
    )
    report.save(report_path)
    click.echo(json.dumps({"ap_mean": report.ap_mean, "acc_mean": report.acc_mean, "f1_macro": report.f1_macro}))


@main.command()
@click.option("--report", "report_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def plot(report_path, out_dir):
    """Render figures and a CSV summary from a metrics report."""
    from .evaluation import MetricsReport
    from .reporting import render_report

    report = MetricsReport.load(report_path)
    created = render_report(report, out_dir)
    for p in created:
        click.echo(str(p))


if __name__ == "__main__":
    main()
