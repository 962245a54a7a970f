"""Command line entry point: turn a model + image folder into a bundle."""

from __future__ import annotations

import sys

import click

from .bundle_io import verify_bundle
from .datasets import load_image_folder
from .errors import ExtractError
from .extract import TripletConfig, build_model, extract_bundle


@click.group()
def main():
    """Candidate-bundle extraction for transferability scoring."""


@main.command()
@click.option("--model", "architecture", required=True,
              help="Architecture name (e.g. resnet18).")
@click.option("--weights", type=click.Path(exists=True), default=None,
              help="Optional state-dict file; otherwise seeded-random.")
@click.option("--data", "data_root", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Image folder with one subdirectory per class.")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Bundle file to write.")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Triplet sampling seed.")
@click.option("--margin", type=float, default=0.05, show_default=True,
              help="Triplet loss margin.")
@click.option("--triplets-per-anchor", type=int, default=1,
              show_default=True)
@click.option("--model-id", default=None,
              help="Identifier stored in the bundle (default: --model).")
@click.option("--source-dataset", default="unknown", show_default=True)
@click.option("--init-seed", type=int, default=0, show_default=True,
              help="Parameter seed when no weights file is given.")
def extract(architecture, weights, data_root, out_path, seed, margin,
            triplets_per_anchor, model_id, source_dataset, init_seed):
    """Extract one candidate bundle from a model and an image folder."""
    try:
        model = build_model(architecture, weights, init_seed)
        dataset = load_image_folder(data_root)
        cfg = TripletConfig(margin=margin,
                            triplets_per_anchor=triplets_per_anchor,
                            seed=seed)
        report = extract_bundle(model, dataset, cfg, out_path,
                                architecture=architecture,
                                model_id=model_id,
                                source_dataset=source_dataset)
    except ExtractError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    click.echo(report.summary())


@main.command()
@click.argument("paths", nargs=-1, required=True,
                type=click.Path(exists=True))
def verify(paths):
    """Re-open bundles and print their verification summaries."""
    failed = False
    for path in paths:
        try:
            click.echo(verify_bundle(path).summary())
        except ExtractError as e:
            click.echo(f"{path}: INVALID ({e})", err=True)
            failed = True
    if failed:
        sys.exit(2)


if __name__ == "__main__":
    main()
