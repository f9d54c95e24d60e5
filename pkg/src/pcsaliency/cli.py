"""``pcsm``: train a classifier, export saliency maps and run the dropping experiments.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric error.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from pcsaliency import harness
from pcsaliency.data import ShapeSpec, generate_shapes, load_cloud, read_bundle, write_bundle, write_ply_colored
from pcsaliency.dropping import SCHEMES
from pcsaliency.errors import FormatError, PCSMError
from pcsaliency.model import TrainConfig, accuracy, atomic_write, load_checkpoint, save_checkpoint, train
from pcsaliency.saliency import SaliencyConfig, saliency_csv, saliency_scores


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except PCSMError as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(err.exit_code)
        except OSError as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(3)


def _int_list(ctx, param, value):
    if value is None:
        return None
    try:
        return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}") from None


def _scheme_list(ctx, param, value):
    schemes = tuple(s.strip() for s in value.split(",") if s.strip())
    bad = [s for s in schemes if s not in SCHEMES]
    if bad or not schemes:
        raise click.BadParameter(f"schemes must be drawn from {', '.join(SCHEMES)}")
    return schemes


def dataset_options(fn):
    fn = click.option("--data", "data_dir", type=click.Path(file_okay=False, path_type=Path),
                      help="Bundle directory (labels.csv), or one holding train/ and test/ bundles.")(fn)
    fn = click.option("--synthetic", type=click.Choice(["default"]), help="Use the generated shape set.")(fn)
    return fn


def _splits(synthetic, data_dir, k=None):
    """(train, test) clouds; either may be None for a bundle without that split."""
    if (synthetic is None) == (data_dir is None):
        raise click.UsageError("give exactly one of --synthetic or --data")
    if synthetic:
        return generate_shapes(ShapeSpec())
    if (data_dir / "train").is_dir() or (data_dir / "test").is_dir():
        train_set = read_bundle(data_dir / "train", k) if (data_dir / "train").is_dir() else None
        test_set = read_bundle(data_dir / "test", k) if (data_dir / "test").is_dir() else None
        return train_set, test_set
    clouds = read_bundle(data_dir, k)
    return clouds, clouds


def _eval_set(synthetic, data_dir, k):
    return _splits(synthetic, data_dir, k)[1]


def _acc(value: float) -> str:
    return f"{value:.4f}"


@click.group(cls=_Group)
def main():
    """Point-cloud saliency maps and point-dropping experiments."""


@main.command()
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
def synth(out):
    """Write the generated shape set as train/ and test/ bundles."""
    train_set, test_set = generate_shapes(ShapeSpec())
    write_bundle(train_set, out / "train")
    write_bundle(test_set, out / "test")
    click.echo(f"wrote {len(train_set)} train and {len(test_set)} test clouds to {out}")


@main.command("train")
@dataset_options
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=20, show_default=True)
@click.option("--lr", default=0.01, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--optimizer", type=click.Choice(["momentum", "sgd"]), default="momentum", show_default=True)
@click.option("--momentum", default=0.9, show_default=True)
@click.option("--point-widths", default="32,64,64", show_default=True, callback=_int_list)
@click.option("--head-widths", default="64", show_default=True, callback=_int_list)
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=Path))
def train_cmd(synthetic, data_dir, seed, epochs, lr, batch_size, optimizer, momentum, point_widths, head_widths, out):
    """Train a classifier and write its checkpoint."""
    train_set, test_set = _splits(synthetic, data_dir)
    if not train_set:
        raise FormatError(f"{data_dir} has no training split")
    config = TrainConfig(
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        optimizer=optimizer,
        momentum=momentum,
        seed=seed,
        point_widths=point_widths,
        head_widths=head_widths,
    )
    result = train(train_set, config)
    save_checkpoint(result.params, out)
    click.echo(f"train_accuracy {_acc(result.train_accuracy)}")
    if test_set is not None and test_set is not train_set:
        click.echo(f"test_accuracy {_acc(accuracy(result.params, test_set))}")
    click.echo(f"checkpoint {out} (k={result.params.k}, F={result.params.F})")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("cloud", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--label", type=int, help="Ground-truth class; the predicted class is used when omitted.")
@click.option("--alpha", default=1.0, show_default=True)
@click.option("--points", "n_points", default=1024, show_default=True, help="Surface samples for .off meshes.")
@click.option("--seed", default=0, show_default=True, help="Sampling seed for .off meshes.")
@click.option("--out-csv", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--out-ply", type=click.Path(dir_okay=False, path_type=Path))
def saliency(checkpoint, cloud, label, alpha, n_points, seed, out_csv, out_ply):
    """Score every point of CLOUD and export the map."""
    model = load_checkpoint(checkpoint)
    if label is not None and not 0 <= label < model.k:
        raise FormatError(f"label {label} outside [0, {model.k}) for {checkpoint}")
    points = load_cloud(cloud, n_points=n_points, seed=seed).points
    smap = saliency_scores(model, points, label, SaliencyConfig(alpha=alpha))
    if out_csv:
        atomic_write(out_csv, saliency_csv(points, smap))
    if out_ply:
        write_ply_colored(points, smap.scores, out_ply)
    click.echo(f"predicted {smap.predicted}")
    click.echo(f"label {smap.label} ({smap.label_source})")
    click.echo(f"loss {float(smap.loss)!r}")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@dataset_options
@click.option("--schemes", default=",".join(SCHEMES), show_default=True, callback=_scheme_list)
@click.option("--grid", default="0,25,50,75,100", show_default=True, callback=_int_list)
@click.option("--T", "T", type=click.IntRange(min=1), help="Iterations for every scheme (default: n/5 for high and critical, 1 otherwise).")
@click.option("--alpha", default=1.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=Path))
def curve(checkpoint, synthetic, data_dir, schemes, grid, T, alpha, seed, out):
    """Accuracy and mean loss versus points dropped, per scheme."""
    model = load_checkpoint(checkpoint)
    clouds = _eval_set(synthetic, data_dir, model.k)
    curves = harness.robustness_curve(model, clouds, schemes, grid, T, alpha, seed)
    atomic_write(out, harness.curves_csv(curves))
    for c in curves:
        click.echo(c.scheme + " " + " ".join(f"{n}:{_acc(acc)}" for n, _, acc, _ in c.rows))


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@dataset_options
@click.option("--n", "n", default=25, show_default=True)
@click.option("--schemes", default=",".join(harness.CONSISTENCY_SCHEMES), show_default=True, callback=_scheme_list)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=Path))
def consistency(checkpoint, synthetic, data_dir, n, schemes, seed, out):
    """Agreement between dropping n selected points and shifting them onto the core."""
    model = load_checkpoint(checkpoint)
    clouds = _eval_set(synthetic, data_dir, model.k)
    report = harness.consistency(model, clouds, n, schemes, seed=seed)
    atomic_write(out, report.to_csv())
    for s in report.schemes:
        click.echo(f"{s} {report.agree[s]}/{report.count} {_acc(report.agreement(s))}")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@dataset_options
@click.option("--study", type=click.Choice(["alpha", "n", "T"]), required=True)
@click.option("--n", "n", type=click.IntRange(min=1), help="Fixed drop count for the alpha and T studies.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=Path))
def paramstudy(checkpoint, synthetic, data_dir, study, n, seed, out):
    """Sweep alpha, the drop count or the iteration count."""
    model = load_checkpoint(checkpoint)
    clouds = _eval_set(synthetic, data_dir, model.k)
    rows = harness.paramstudy(model, clouds, study, n, seed)
    atomic_write(out, harness.study_csv(rows))
    for row in rows:
        click.echo(f"{study}={row[1]} {row[2]} n={row[3]} T={row[4]} accuracy {_acc(row[6])} loss {row[7]:.4f}")


@main.command()
@click.argument("checkpoint_a", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("checkpoint_b", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@dataset_options
@click.option("--n", "n", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=Path))
def generalize(checkpoint_a, checkpoint_b, synthetic, data_dir, n, seed, out):
    """Evaluate model B on clouds high-dropped against model A."""
    model_a = load_checkpoint(checkpoint_a)
    model_b = load_checkpoint(checkpoint_b, expect_k=model_a.k)
    clouds = _eval_set(synthetic, data_dir, model_b.k)
    rows = harness.generalize(model_a, model_b, clouds, n, seed)
    atomic_write(out, harness.generalize_csv(rows))
    for row in rows:
        click.echo(f"{row[0]} accuracy {_acc(row[3])} loss {row[4]:.4f}")


if __name__ == "__main__":
    main()
