"""
FedHAR experiment runner
Generates synthetic federations, runs the three experimental arms, compares reports and
lists the run registry.

Usage:
    python run_experiment.py generate --config configs/reference.json --out data/reference
    python run_experiment.py run --config configs/reference.json --arm fl_ae --workers 4
    python run_experiment.py compare runs/*/report.json
    python run_experiment.py history --out runs
"""
import sys
import os
import json
import logging
import platform
from datetime import datetime, timezone

# Add the project directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pandas as pd

from config import (
    ARM_LABELS,
    CODE_VERSION,
    LOG_FORMAT,
    LOG_LEVEL,
    OUTPUT_DIR,
    REGISTRY_ENABLED,
    ConfigError,
    config_echo,
    load_experiment_config,
    full_scale_synth_config,
)
from data_loader import (
    DataError,
    build_federation_layout,
    load_manifest,
    storage_footprint,
    write_manifest,
    write_window_file,
)
from db_schema import record_run, registry_url
from evaluation import (
    MetricError,
    class_distribution,
    compare_reports,
    export_embeddings,
    load_report,
    per_dataset_breakdown,
    render_comparison,
    write_confusion_csv,
    write_report_json,
)
from federation import (
    CONVENTIONAL_AE,
    NonFiniteLossError,
    communication_cost,
    fine_tune,
    round_records_frame,
    run_centralized_baseline,
    run_federated_pretraining,
)
from models import ModelStructureError
from synthetic import generate_synthetic_clients
from utils.autodiff import ShapeError
from utils.db_utils import get_round_metrics, get_runs
from utils.params import ParamFormatError, save_params

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

# settings that change how a run executes but never what it computes
EXECUTION_ONLY_KEYS = ("workers", "output_dir")


def setup_logging(level=LOG_LEVEL):
    """Progress logging to stderr; machine-readable output goes to files"""
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stderr)],
    )


def attach_file_log(path):
    handler = logging.FileHandler(path)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def detach_file_log(handler):
    logging.getLogger().removeHandler(handler)
    handler.close()


def report_config_echo(cfg):
    """Config echo embedded in reports, without execution-only settings"""
    echo = config_echo(cfg)
    for key in EXECUTION_ONLY_KEYS:
        echo.pop(key, None)
    return echo


# ============================================================
# DATA
# ============================================================
def load_client_sets(cfg):
    """Labeled per-client window sets from the configured data source"""
    if cfg.data.source == "synthetic":
        return generate_synthetic_clients(cfg.data.synth, cfg.data_seed)
    return load_manifest(cfg.data.manifest)


def generate_dataset(cfg, out_dir, full_scale=False):
    """
    Write one FWIN file per synthetic client plus a manifest.

    Returns:
        str: manifest path
    """
    if cfg.data.source != "synthetic":
        raise ConfigError("generate needs data.source = 'synthetic'")
    synth = full_scale_synth_config() if full_scale else cfg.data.synth
    client_sets = generate_synthetic_clients(synth, cfg.data_seed)

    client_dir = os.path.join(out_dir, "clients")
    os.makedirs(client_dir, exist_ok=True)
    files = []
    for ws in client_sets:
        path = os.path.join(client_dir, f"{ws.client_id}.fwin")
        write_window_file(path, ws)
        files.append(path)

    layout = build_federation_layout(client_sets, cfg.data_seed)
    per_client, per_dataset = storage_footprint(layout)
    per_client.to_csv(os.path.join(out_dir, "storage_footprint.csv"), index=False)
    per_dataset.to_csv(os.path.join(out_dir, "storage_by_dataset.csv"), index=False)

    tags = sorted({ws.source_dataset for ws in client_sets})
    manifest_path = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest_path, client_sets, cfg.data_seed, files, extra={
        "tags": tags,
        "n_clients": len(client_sets),
        "n_windows": int(sum(len(ws) for ws in client_sets)),
        "code_version": CODE_VERSION,
    })
    logger.info(f"Wrote {len(files)} client files and manifest to {out_dir}")
    return manifest_path


# ============================================================
# ARMS
# ============================================================
def communication_summary(model_bytes, records, n_clients):
    bytes_down = int(sum(r.bytes_down for r in records))
    bytes_up = int(sum(r.bytes_up for r in records))
    mb = 1024 ** 2
    return {
        "model_bytes": model_bytes,
        "model_mb": model_bytes / mb,
        "rounds": len(records),
        "bytes_down_total": bytes_down,
        "bytes_up_total": bytes_up,
        "per_client_mb_one_way": (bytes_down / n_clients / mb) if n_clients else 0.0,
        "full_participation_mb_one_way": communication_cost(model_bytes, len(records)) / mb,
    }


def run_arm(cfg, registry=None):
    """
    Execute one experimental arm end to end and write its outputs.

    Args:
        cfg: validated ExperimentConfig
        registry: SQLAlchemy URL for the run registry, or None to skip it

    Returns:
        dict: report dictionary as written to report.json
    """
    run_dir = os.path.join(cfg.output_dir, cfg.arm)
    os.makedirs(run_dir, exist_ok=True)
    log_handler = attach_file_log(os.path.join(run_dir, "run.log"))
    try:
        logger.info(f"Running arm '{cfg.arm}' ({ARM_LABELS[cfg.arm]}), seed {cfg.seed}, workers {cfg.workers}")

        layout = build_federation_layout(load_client_sets(cfg), cfg.data_seed)
        class_distribution(layout).to_csv(os.path.join(run_dir, "class_distribution.csv"))
        per_client, _ = storage_footprint(layout)
        per_client.to_csv(os.path.join(run_dir, "storage_footprint.csv"), index=False)

        records = []
        if cfg.arm == "fl_ae":
            checkpoint_dir = None
            if cfg.checkpoint_every:
                checkpoint_dir = os.path.join(run_dir, "checkpoints")
                os.makedirs(checkpoint_dir, exist_ok=True)
            ae_params, records = run_federated_pretraining(
                layout, cfg.fed, cfg.model, workers=cfg.workers,
                checkpoint_dir=checkpoint_dir, checkpoint_every=cfg.checkpoint_every,
            )
            round_records_frame(records).to_csv(os.path.join(run_dir, "rounds.csv"), index=False)
            save_params(ae_params, os.path.join(run_dir, "final_autoencoder.faes"))
            model_bytes = ae_params.byte_size
            result = fine_tune(ae_params, layout.server_labeled, cfg.finetune, cfg.model, cfg.classifier)
        else:
            result, curve = run_centralized_baseline(layout, cfg.arm, cfg.fed, cfg.finetune, cfg.model, cfg.classifier)
            if cfg.arm == CONVENTIONAL_AE:
                pd.DataFrame(curve, columns=["round", "train_loss", "server_loss"]).to_csv(
                    os.path.join(run_dir, "ae_pretrain_loss.csv"), index=False)
            model_bytes = 0

        save_params(result.params, os.path.join(run_dir, "classifier.faes"))
        result.history_frame().to_csv(os.path.join(run_dir, "finetune_loss.csv"), index=False)

        report = per_dataset_breakdown(result.params, layout, spec=cfg.model, n_classes=cfg.classifier.n_classes)
        comm = communication_summary(model_bytes, records, len(layout.clients))
        metadata = {
            "code_version": CODE_VERSION,
            "arm_label": ARM_LABELS[cfg.arm],
            "data_seed": cfg.data_seed,
            "n_clients": len(layout.clients),
            "n_server_labeled": len(layout.server_labeled),
            "n_test": len(layout.server_test),
            "communication": comm,
        }
        report_dict = report.to_dict(cfg.arm, report_config_echo(cfg), metadata)
        report_dict["rounds"] = [r.to_json() for r in records]
        write_report_json(report_dict, os.path.join(run_dir, "report.json"))
        write_confusion_csv(report.confusion, os.path.join(run_dir, "confusion.csv"))

        outputs = sorted(os.listdir(run_dir))
        if cfg.export_embeddings:
            embeddings = export_embeddings(result.params, layout.server_test, layout.test_client_ids, cfg.model)
            embeddings.to_csv(os.path.join(run_dir, "embeddings.csv"), index=False)
            outputs.append("embeddings.csv")

        manifest = {
            "arm": cfg.arm,
            "config": config_echo(cfg),
            "seeds": {
                "seed": cfg.seed,
                "data_seed": cfg.data_seed,
                "fed_seed": cfg.fed.seed,
                "finetune_seed": cfg.finetune.seed,
            },
            "code_version": CODE_VERSION,
            "python_version": platform.python_version(),
            "numpy_version": np.__version__,
            "communication": comm,
            "outputs": sorted(set(outputs)),
            "finished_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        with open(os.path.join(run_dir, "run_manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

        if registry:
            try:
                record_run(registry, cfg, report_dict, records, model_bytes, len(layout.clients))
            except Exception as e:
                logger.warning(f"Run registry unavailable, run not recorded: {e}")

        logger.info(f"Arm '{cfg.arm}' finished: combined macro-F1 {report.macro_f1:.4f}")
        return report_dict
    finally:
        detach_file_log(log_handler)


# ============================================================
# COMMANDS
# ============================================================
def _load_with_overrides(args):
    cfg = load_experiment_config(args.config)
    if getattr(args, "arm", None):
        cfg.arm = args.arm
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.fed.seed = args.seed
        cfg.finetune.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "rounds", None) is not None:
        cfg.fed.rounds = args.rounds
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "export_embeddings", False):
        cfg.export_embeddings = True
    cfg.validate()
    return cfg


def cmd_generate(args):
    cfg = _load_with_overrides(args)
    generate_dataset(cfg, cfg.output_dir, full_scale=args.full_scale)
    return EXIT_OK


def cmd_run(args):
    cfg = _load_with_overrides(args)
    registry = None
    if REGISTRY_ENABLED and not args.no_registry:
        registry = registry_url(cfg.output_dir)
    run_arm(cfg, registry)
    return EXIT_OK


def cmd_compare(args):
    reports = [load_report(path) for path in args.reports]
    table = compare_reports(reports)
    if args.csv:
        table.to_csv(args.csv)
        logger.info(f"Wrote comparison table to {args.csv}")
    print(render_comparison(table))
    return EXIT_OK


def cmd_history(args):
    url = args.registry_url or registry_url(args.out)
    if args.run_id is not None:
        print(get_round_metrics(url, args.run_id).to_string(index=False))
    else:
        print(get_runs(url, arm=args.arm, seed=args.seed, limit=args.limit).to_string(index=False))
    return EXIT_OK


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(description='FedHAR semi-supervised federated learning simulator')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('generate', help='Write synthetic client files and a manifest')
    gen.add_argument('--config', type=str, help='Experiment config JSON')
    gen.add_argument('--seed', type=int, help='Override the experiment seed')
    gen.add_argument('--out', type=str, help='Output directory')
    gen.add_argument('--full-scale', action='store_true', help='Use the 80-client federation of the four public datasets')
    gen.set_defaults(func=cmd_generate)

    run = sub.add_parser('run', help='Run one experimental arm end to end')
    run.add_argument('--config', type=str, help='Experiment config JSON')
    run.add_argument('--arm', type=str, choices=list(ARM_LABELS), help='Override the arm')
    run.add_argument('--seed', type=int, help='Override the experiment seed')
    run.add_argument('--workers', type=int, help='Parallel client workers')
    run.add_argument('--rounds', type=int, help='Override the number of FedAvg rounds')
    run.add_argument('--out', type=str, help='Output directory')
    run.add_argument('--export-embeddings', action='store_true', help='Write latent embeddings of the test set')
    run.add_argument('--no-registry', action='store_true', help='Do not record the run in the registry')
    run.set_defaults(func=cmd_run)

    compare = sub.add_parser('compare', help='Table of macro F-scores across reports')
    compare.add_argument('reports', nargs='+', help='report.json files')
    compare.add_argument('--csv', type=str, help='Also write the table as CSV')
    compare.set_defaults(func=cmd_compare)

    history = sub.add_parser('history', help='List registered runs')
    history.add_argument('--out', type=str, default=OUTPUT_DIR,
                         help='Output directory holding experiments.db')
    history.add_argument('--registry-url', type=str, help='SQLAlchemy URL of the registry')
    history.add_argument('--arm', type=str, help='Only runs of this arm')
    history.add_argument('--seed', type=int, help='Only runs with this seed')
    history.add_argument('--limit', type=int, help='Maximum number of runs')
    history.add_argument('--run-id', type=int, help='Show the round metrics of one run')
    history.set_defaults(func=cmd_history)

    return parser


def main(argv=None):
    """Main entry point. Returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging()

    try:
        return args.func(args)
    except (ConfigError, ModelStructureError, ShapeError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERIC
    except (DataError, ParamFormatError, MetricError, OSError, ValueError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
