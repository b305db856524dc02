"""Command-line interface.

Subcommands: ``generate`` (emit a dataset), ``train`` (one experiment),
``sweep`` (method x bag-size grid), ``evaluate`` (checkpoint on a test CSV),
and ``regret-audit`` (regret report on synthetic small instances).

Exit code 0 on success.  Failures exit nonzero with a one-line JSON object
on stderr: ``{"error": <type>, "message": <detail>}``.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import datagen, harness, labeler
from .classifier import load_checkpoint
from .domain import read_instances_csv
from .harness import ExperimentConfig, Method, desk_scale_config, paper_scale_config

_METHOD_CHOICES = [m.value for m in Method]


def _build_config(ctx: click.Context, preset: str, config_file: str | None,
                  forced: dict | None = None, **flags) -> ExperimentConfig:
    """Layer config sources: preset defaults < config file < explicit flags.

    ``forced`` entries (seed, output dir) always apply; they come from
    dedicated CLI arguments rather than config-mirroring flags.
    """
    preset_fn = {"desk": desk_scale_config, "paper": paper_scale_config}[preset]
    values = preset_fn().to_dict()
    if config_file:
        values.update(json.loads(Path(config_file).read_text()))
    for name, value in flags.items():
        if value is None:
            continue
        source = ctx.get_parameter_source(name)
        if source is not None and source.name == "COMMANDLINE":
            values[name] = value
    for name, value in (forced or {}).items():
        if value is not None:
            values[name] = value
    return ExperimentConfig.from_dict(values)


@click.group()
def cli():
    """Learning from label proportions via online pseudo-labeling."""


def _config_options(fn):
    opts = [
        click.option("--config", "config_file", type=click.Path(exists=True),
                     default=None, help="JSON file of config overrides."),
        click.option("--preset", type=click.Choice(["desk", "paper"]),
                     default="desk", show_default=True,
                     help="Base defaults: laptop-sized or full-scale."),
        click.option("--method", type=click.Choice(_METHOD_CHOICES), default=None),
        click.option("--num-classes", "num_classes", type=int, default=None),
        click.option("--feature-dim", "feature_dim", type=int, default=None),
        click.option("--class-scale", "class_scale", type=float, default=None),
        click.option("--separation", type=float, default=None),
        click.option("--bag-size", "bag_size", type=int, default=None),
        click.option("--n-bags", "n_bags", type=int, default=None),
        click.option("--test-fraction", "test_fraction", type=float, default=None),
        click.option("--validation-ratio", "validation_ratio", type=float, default=None),
        click.option("--model", "model_kind", type=click.Choice(["softmax_linear", "mlp"]),
                     default=None),
        click.option("--hidden-width", "hidden_width", type=int, default=None),
        click.option("--activation", type=click.Choice(["relu", "tanh"]), default=None),
        click.option("--epochs", type=int, default=None),
        click.option("--learning-rate", "learning_rate", type=float, default=None),
        click.option("--batch-bags", "batch_bags", type=int, default=None),
        click.option("--eta", type=float, default=None),
        click.option("--audit-regret", "audit_regret", is_flag=True, default=None),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@cli.command()
@_config_options
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True,
              help="Directory for the CSV files and manifest.")
@click.pass_context
def generate(ctx, config_file, preset, seed, out_dir, **flags):
    """Generate a synthetic blob dataset and write it as CSV files."""
    cfg = _build_config(ctx, preset, config_file, forced={"master_seed": seed}, **flags)
    train, validation, test_pool, spec = harness.prepare_data(cfg)
    datagen.write_dataset_dir(out_dir, train, validation, test_pool, spec,
                              seed=cfg.master_seed, bag_size=cfg.bag_size)
    click.echo(json.dumps({
        "out_dir": str(out_dir),
        "train_bags": train.num_bags,
        "validation_bags": validation.num_bags,
        "test_instances": test_pool.size,
    }))


@cli.command()
@_config_options
@click.option("--seed", type=int, required=True, help="Master seed (required).")
@click.option("--out", "out_dir", type=click.Path(), required=True,
              help="Directory for records, summary, and checkpoints.")
@click.pass_context
def train(ctx, config_file, preset, seed, out_dir, **flags):
    """Run one experiment config end to end."""
    cfg = _build_config(ctx, preset, config_file,
                        forced={"master_seed": seed, "output_dir": str(out_dir)},
                        **flags)
    result = harness.run_llp_training(cfg)
    click.echo(json.dumps({
        "out_dir": str(out_dir),
        "selected_epoch": result.selected_epoch,
        "selected_test_accuracy": result.selected_record.test_accuracy,
        "final_test_accuracy": result.records[-1].test_accuracy,
    }))


@cli.command()
@_config_options
@click.option("--seed", type=int, required=True, help="Base master seed (required).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--bag-sizes", "bag_sizes", required=True,
              help="Comma-separated bag sizes; each must divide the budget.")
@click.option("--methods", default=None,
              help="Comma-separated methods (default: the configured one).")
@click.option("--n-seeds", "n_seeds", type=int, default=5, show_default=True)
@click.pass_context
def sweep(ctx, config_file, preset, seed, out_dir, bag_sizes, methods, n_seeds, **flags):
    """Run a method x bag-size grid at a fixed instance budget."""
    cfg = _build_config(ctx, preset, config_file, forced={"master_seed": seed}, **flags)
    sizes = [int(s) for s in bag_sizes.split(",") if s.strip()]
    method_list = ([m.strip() for m in methods.split(",") if m.strip()]
                   if methods else None)
    result = harness.sweep_bag_sizes(cfg, sizes, methods=method_list,
                                     n_seeds=n_seeds, out_dir=out_dir)
    click.echo(json.dumps({
        "out_dir": str(out_dir),
        "budget": result.budget,
        "accuracy_table": {m: {str(s): list(v) for s, v in row.items()}
                           for m, row in result.accuracy_table().items()},
    }))


@cli.command()
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True), required=True,
              help="Instances CSV with a true_label column.")
def evaluate(model_path, data_path):
    """Score a checkpoint's instance accuracy on a labeled CSV."""
    model = load_checkpoint(model_path)
    features, _, labels = read_instances_csv(data_path)
    if labels is None:
        raise click.ClickException("the data file has no true_label column")
    known = labels >= 0
    if not known.any():
        raise click.ClickException("no labeled instances to evaluate")
    accuracy = harness.evaluate_instance_accuracy(model, features[known], labels[known])
    click.echo(json.dumps({"instances": int(known.sum()), "accuracy": accuracy}))


@cli.command("regret-audit")
@click.option("--num-classes", type=int, default=3, show_default=True)
@click.option("--bag-size", type=int, default=6, show_default=True)
@click.option("--epochs", type=int, default=64, show_default=True)
@click.option("--seeds", "n_seeds", type=int, default=5, show_default=True)
@click.option("--eta", type=float, default=5.0, show_default=True)
@click.option("--strategy", type=click.Choice(["fpl", "greedy", "naive"]),
              default="fpl", show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the JSON report here instead of stdout.")
def regret_audit(num_classes, bag_size, epochs, n_seeds, eta, strategy, out_path):
    """Measure regret of the decision rule on i.i.d. Uniform[0,1] losses."""
    report = run_regret_audit(num_classes, bag_size, epochs, n_seeds, eta, strategy)
    text = json.dumps(report, indent=2)
    if out_path:
        Path(out_path).write_text(text)
        click.echo(json.dumps({"out": str(out_path),
                               "mean_regret_per_epoch": report["mean_regret_per_epoch"]}))
    else:
        click.echo(text)


def run_regret_audit(num_classes: int, bag_size: int, epochs: int,
                     n_seeds: int, eta: float, strategy: str) -> dict:
    """Simulate the online decision process on synthetic losses and report
    the measured regret per seed."""
    from .domain import Bag

    cfg = labeler.LabelerConfig(eta=eta, strategy=labeler.Strategy(strategy),
                                audit_regret=True)
    per_seed = []
    for seed in range(n_seeds):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                           spawn_key=(777,)))
        proportions = rng.dirichlet(np.ones(num_classes))
        bag = Bag.from_proportions(
            features=rng.standard_normal((bag_size, 1)), proportions=proportions,
            bag_id=0)
        state = labeler.new_bag_state(bag, seed, cfg)
        for _ in range(epochs):
            losses = rng.uniform(0.0, 1.0, size=(num_classes, bag_size))
            labeler.apply_update(state, losses, cfg)
        regret = labeler.measure_regret(state.decision_history,
                                        state.loss_history, bag)
        per_seed.append({"seed": seed, "regret": regret,
                         "regret_per_epoch": regret / epochs})
    return {
        "num_classes": num_classes, "bag_size": bag_size, "epochs": epochs,
        "eta": eta, "strategy": strategy,
        "per_seed": per_seed,
        "mean_regret": float(np.mean([r["regret"] for r in per_seed])),
        "mean_regret_per_epoch": float(np.mean([r["regret_per_epoch"] for r in per_seed])),
    }


def main(argv=None) -> int:
    """Entry point that converts failures to machine-readable stderr JSON."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        print(json.dumps({"error": "Aborted", "message": "aborted"}), file=sys.stderr)
        return 130
    except click.exceptions.ClickException as exc:
        print(json.dumps({"error": type(exc).__name__, "message": exc.format_message()}),
              file=sys.stderr)
        return exc.exit_code or 2
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports everything
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
