"""``lsf`` command line.

Settings come from built-in defaults, then ``--config`` (``key = value``
lines), then ``--set key=value`` and the explicit flags of each command.

Exit codes: 0 success, 1 usage, 2 data or format error, 3 numeric divergence.
"""

from __future__ import annotations

import functools
import logging
import sys

import click

from . import network, pipeline, synthetic
from .errors import DataError, DivergenceError, FormatError

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3


def _common(fn):
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                  help="key = value settings file.")
    @click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override any setting.")
    @click.option("--seed", type=int, default=None)
    @click.option("--out", "out_dir", default=None, help="Output directory for artifacts.")
    @click.option("--train-manifest", default=None)
    @click.option("--test-manifest", default=None)
    @click.option("--model", default=None)
    @click.option("--selector", default=None)
    @click.option("--index", default=None)
    @click.option("--task", type=click.Choice(pipeline.TASKS), default=None)
    @click.option("--quiet", is_flag=True, help="Only print errors.")
    @functools.wraps(fn)
    def wrapper(config_path, overrides, quiet, **flags):
        values = pipeline.read_config_file(config_path) if config_path else {}
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise click.UsageError(f"--set expects KEY=VALUE, got {item!r}")
            values[key.strip()] = value.strip()
        own = {k: flags.pop(k) for k in list(flags) if k in _COMMAND_ARGS}
        values.update({k: v for k, v in flags.items() if v is not None})
        config = pipeline.PipelineConfig.from_mapping(values)
        log = (lambda msg: None) if quiet else click.echo
        return fn(config, log, **own)

    return wrapper


# per-command arguments that are not config keys
_COMMAND_ARGS = {"split", "descriptor_file"}


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def cli(verbose):
    """Loss-switching fusion features and projection-search video classification."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command("train-fusion")
@_common
def train_fusion(config, log):
    """Training phase 1: fit the fusion network on sampled descriptor rows."""
    pipeline.cmd_train_fusion(config, log)


@cli.command()
@click.option("--split", type=click.Choice(["train", "test"]), default="train")
@_common
def extract(config, log, split):
    """Encode and average-pool every video of a manifest into a features CSV."""
    pipeline.cmd_extract(config, split, log)


@cli.command("fit-selector")
@_common
def fit_selector(config, log):
    """Rank pooled components by Fisher score and keep the top q%."""
    pipeline.cmd_fit_selector(config, log)


@cli.command("build-index")
@_common
def build_index(config, log):
    """Build the per-class projection index over selected training features."""
    pipeline.cmd_build_index(config, log)


@cli.command()
@click.argument("descriptor_file", type=click.Path(exists=True, dir_okay=False))
@_common
def classify(config, log, descriptor_file):
    """Classify one video's descriptor file."""
    pipeline.cmd_classify(config, descriptor_file, click.echo)


@cli.command()
@click.option("--random-pairs", type=int, default=None,
              help="Sweep this many random (N, K) pairs instead of the fixed grid.")
@_common
def evaluate(config, log):
    """Accuracy over the (N, K) sweep plus a confusion matrix at the default pair."""
    report = pipeline.cmd_evaluate(config, lambda msg: None)
    log(report.table())


@cli.command()
@click.option("--random-pairs", type=int, default=None,
              help="Sweep this many random (N, K) pairs instead of the fixed grid.")
@_common
def run(config, log):
    """All training and evaluation stages in order."""
    pipeline.run_all(config, log)


@cli.command("gen-synthetic")
@click.option("--out", "out_dir", required=True)
@click.option("--seed", type=int, default=0)
@click.option("--classes", type=int, default=6)
@click.option("--train", "n_train", type=int, default=600)
@click.option("--test", "n_test", type=int, default=300)
@click.option("--min-points", type=int, default=50)
@click.option("--max-points", type=int, default=500)
@click.option("--separation", type=float, default=10.0, help="Centroid distance in units of sigma.")
@click.option("--sigma", type=float, default=0.05)
@click.option("--quiet", is_flag=True)
def gen_synthetic(out_dir, seed, classes, n_train, n_test, min_points, max_points, separation, sigma, quiet):
    """Write a Gaussian-cluster descriptor dataset with train/test manifests."""
    spec = synthetic.SyntheticSpec(n_classes=classes, n_train=n_train, n_test=n_test, min_points=min_points,
                                   max_points=max_points, separation=separation, sigma=sigma, seed=seed)
    train, test = synthetic.generate(out_dir, spec)
    if not quiet:
        click.echo(f"train manifest: {train}\ntest manifest:  {test}")


@cli.command()
@click.option("--dims", default="20,12,8", help="D_in,H,D_code")
@click.option("--classes", type=int, default=3)
@click.option("--seed", type=int, default=0)
@click.option("--tol", type=float, default=1e-5)
def gradcheck(dims, classes, seed, tol):
    """Compare backprop gradients with central finite differences."""
    layer_dims = tuple(int(d) for d in dims.split(","))
    report = network.gradient_check(layer_dims, classes, seed=seed)
    worst = 0.0
    for loss, errs in report.items():
        for name, err in errs.items():
            click.echo(f"{loss} {name:<3s} relative error {err:.3e}")
            worst = max(worst, err)
    if worst >= tol:
        raise DivergenceError(f"gradient check failed: worst relative error {worst:.3e} >= {tol:g}")
    click.echo(f"ok (worst {worst:.3e} < {tol:g})")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="lsf", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE
    except DivergenceError as exc:
        click.echo(f"diverged: {exc}", err=True)
        return EXIT_DIVERGED
    except (FormatError, DataError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
