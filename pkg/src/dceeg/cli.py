"""Command-line pipeline driver.

Subcommands: synth, preprocess, train, distill, eval, ecam, report.
Exit codes: 0 success, 1 runtime failure, 2 usage/config error. Tabular
outputs are CSV, training curves are NDJSON, and every run echoes its
fully resolved configuration into the output directory.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

USAGE_EXIT = 2
RUNTIME_EXIT = 1


def _add_global_flags(parser, suppress: bool = False) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="run configuration file")
    parser.add_argument("--seed", type=int, default=default, help="override the configured seed")
    parser.add_argument("--out-dir", type=Path, default=default,
                        help="override the configured output directory")
    parser.add_argument("--precision", choices=["f32", "f64"], default=default,
                        help="override numeric precision")
    parser.add_argument("--threads", type=int, default=default,
                        help="cap BLAS threads (set before numpy loads)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dceeg",
                                     description="EEG/text contrastive seizure detection pipeline")
    _add_global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_global_flags(p, suppress=True)
        return p

    add_command("synth", "generate synthetic DCEEG-RAW recordings")

    p = add_command("preprocess", "filter, resample, segment, balance, z-score")
    p.add_argument("--raw-dir", type=Path, required=True)
    p.add_argument("--dataset", type=Path, help="output dataset path (default <out>/dataset.dceegset)")

    p = add_command("train", "train the teacher")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--cv", type=int, default=0, help="also run k-fold cross-validation")

    p = add_command("distill", "distill the teacher into the student")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint prefix")

    p = add_command("eval", "evaluate a checkpoint on a dataset")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="checkpoint prefix")

    p = add_command("ecam", "emit per-channel activation maps")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--limit", type=int, default=16, help="number of epochs to attribute")

    p = add_command("report", "parameter/FLOP accounting and the ablation grid")
    p.add_argument("--dataset", type=Path, help="smoke dataset for --ablation")
    p.add_argument("--ablation", action="store_true", help="train each ablation variant one epoch")
    p.add_argument("--batch-size", type=int, default=None, help="batch size for FLOP accounting")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
    try:
        return _dispatch(args)
    except BrokenPipeError:
        return RUNTIME_EXIT
    except Exception as exc:  # classified below to keep the exit-code contract
        from .config import ConfigError
        from .synth import SynthError
        kind = type(exc).__name__
        print(f"error: {kind}: {exc}", file=sys.stderr)
        if isinstance(exc, (ConfigError, SynthError)):
            return USAGE_EXIT
        return RUNTIME_EXIT


def _dispatch(args) -> int:
    handler = {
        "synth": cmd_synth,
        "preprocess": cmd_preprocess,
        "train": cmd_train,
        "distill": cmd_distill,
        "eval": cmd_eval,
        "ecam": cmd_ecam,
        "report": cmd_report,
    }[args.command]
    return handler(args)


def _load_run_config(args, required: bool = True):
    from .config import ConfigError, RunConfigFile, load_config
    if args.config is None:
        if required:
            raise ConfigError("--config is required for this command")
        cfg = RunConfigFile()
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
        cfg.trainer.seed = args.seed
        cfg.distill.seed = args.seed
        if cfg.synth is not None:
            cfg.synth.seed = args.seed
    if args.precision is not None:
        cfg.run.precision = args.precision
        cfg.trainer.precision = args.precision
        cfg.distill.precision = args.precision
    if args.out_dir is not None:
        cfg.run.out_dir = str(args.out_dir)
    return cfg


def _prepare_out(cfg) -> Path:
    from .config import dump_config
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(dump_config(cfg))
    return out


def _write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .config import ConfigError
    from .rawio import save_recording
    from .synth import generate_all

    cfg = _load_run_config(args)
    if cfg.synth is None:
        raise ConfigError("synth command needs a [synth] section with [class:*] signatures")
    out = _prepare_out(cfg)
    raw_dir = out / "raw"
    raw_dir.mkdir(exist_ok=True)
    recordings = generate_all(cfg.synth)
    for rec in recordings:
        save_recording(raw_dir / f"{rec.source_id}.dceeg", rec)
    print(f"wrote {len(recordings)} recordings to {raw_dir}")
    return 0


def cmd_preprocess(args) -> int:
    from . import signal as sig
    from .rawio import (file_sha256, load_recording, save_dataset,
                        write_provenance)

    cfg = _load_run_config(args)
    out = _prepare_out(cfg)
    dataset_path = args.dataset or out / "dataset.dceegset"
    pp = cfg.preprocess

    raw_files = sorted(Path(args.raw_dir).glob("*.dceeg"))
    if not raw_files:
        raise sig.PipelineError(f"no .dceeg recordings under {args.raw_dir}")

    epochs = []
    channels, rate = None, None
    for path in raw_files:
        rec = load_recording(path)
        rec = sig.clip_amplitude(rec, pp.clip_uv)
        rec = sig.bandpass_filter(rec, pp.band_low_hz, pp.band_high_hz)
        rec = sig.resample(rec, pp.target_rate_hz)
        if pp.zscore_scope == "recording":
            rec = sig.zscore_recording(rec)
        epochs.extend(sig.segment(rec, cfg.policy))
        channels, rate = rec.channels, rec.sample_rate_hz
    if pp.reject_artifacts:
        epochs = sig.reject_artifact_epochs(epochs, pp.clip_uv, pp.flatline_std)
    epochs = sig.balance(epochs, cfg.policy, cfg.run.seed)
    if pp.zscore_scope == "epoch":
        epochs = [sig.zscore(e) for e in epochs]

    save_dataset(dataset_path, epochs, channels, rate)
    write_provenance(Path(str(dataset_path) + ".provenance.json"), {
        "inputs": {p.name: file_sha256(p) for p in raw_files},
        "policy": vars(cfg.policy),
        "preprocess": vars(pp),
        "seed": cfg.run.seed,
        "epochs": len(epochs),
        "dataset_sha256": file_sha256(dataset_path),
    })
    counts = {}
    for e in epochs:
        counts[e.label] = counts.get(e.label, 0) + 1
    print(f"wrote {len(epochs)} epochs to {dataset_path} ({counts})")
    return 0


def _teacher_pieces(cfg, dataset):
    from .presets import default_templates
    class_names = dataset.classes
    templates = default_templates(class_names)
    return class_names, templates


def cmd_train(args) -> int:
    import numpy as np

    from .metrics import cross_validate, report_rows
    from .rawio import load_dataset
    from .trainer import TeacherModel, fit, predict

    cfg = _load_run_config(args)
    out = _prepare_out(cfg)
    dataset = load_dataset(args.dataset)
    class_names, templates = _teacher_pieces(cfg, dataset)

    if args.cv:
        def train_fold(train_x, train_y, test_x, test_y, fold):
            model = TeacherModel.build(class_names, cfg.teacher, cfg.text,
                                       cfg.trainer, templates=templates)
            fit(model, train_x, train_y, cfg.trainer,
                curve_path=out / f"teacher_fold{fold}_curves.ndjson")
            return predict(model, test_x)[0]

        result = cross_validate(dataset.data, dataset.labels, train_fold,
                                n_folds=args.cv, seed=cfg.run.seed,
                                class_names=class_names,
                                groups=dataset.source_ids if cfg.eval.grouped_by_source else None)
        for fold, rep in enumerate(result.reports):
            _write_csv(out / f"teacher_fold{fold}_metrics.csv", report_rows(rep))
        for leak in result.leaks:
            print(f"warning: {leak}", file=sys.stderr)
        print("cv mean accuracy: "
              f"{result.mean['acc']:.4f} +/- {result.std['acc']:.4f}")

    model = TeacherModel.build(class_names, cfg.teacher, cfg.text, cfg.trainer,
                               templates=templates)
    curves = fit(model, dataset.data, dataset.labels, cfg.trainer,
                 curve_path=out / "teacher_curves.ndjson")
    model.save(out / "teacher")
    model.vocab.save(out / "vocabulary.txt")
    templates.save(out / "templates.txt")
    print(f"teacher trained {len(curves)} epochs, final train accuracy "
          f"{curves[-1].accuracy:.4f}; checkpoint at {out / 'teacher.ckpt'}")
    return 0


def cmd_distill(args) -> int:
    from .distill import distill, epochs_to_accuracy
    from .eeg_encoder import count_params, total_flops
    from .rawio import load_dataset
    from .trainer import TeacherModel

    cfg = _load_run_config(args)
    out = _prepare_out(cfg)
    dataset = load_dataset(args.dataset)
    teacher = TeacherModel.load(args.teacher)
    student_cfg = cfg.resolved_student()

    student, curves, updated = distill(teacher, student_cfg, dataset.data,
                                       dataset.labels, cfg.distill,
                                       curve_path=out / "student_curves.ndjson")
    student.save(out / "student")
    (out / "updated_tensors.txt").write_text("\n".join(updated) + "\n")

    t_cfg = teacher.eeg.config
    batch = cfg.eval.report_batch_size
    rows = [["model", "params", "flops_total", "epochs_to_95pct_train_acc"],
            ["teacher", str(count_params(t_cfg, teacher.eeg_prompts_enabled)),
             str(total_flops(t_cfg, batch)), ""],
            ["student", str(count_params(student_cfg)),
             str(total_flops(student_cfg, batch)),
             str(epochs_to_accuracy(curves, 0.95) or "not reached")]]
    _write_csv(out / "distillation_report.csv", rows)
    print(f"student distilled {len(curves)} epochs, final train accuracy "
          f"{curves[-1].accuracy:.4f}; {len(updated)} tensors updated")
    return 0


def _load_any_model(prefix):
    import json

    from .distill import StudentModel
    from .trainer import TeacherModel
    meta = json.loads(Path(prefix).with_suffix(".meta.json").read_text())
    if meta.get("kind") == "student":
        return StudentModel.load(prefix)
    return TeacherModel.load(prefix)


def cmd_eval(args) -> int:
    from .metrics import compute_metrics, report_rows, roc_points
    from .rawio import load_dataset
    from .trainer import predict

    cfg = _load_run_config(args, required=False)
    out = _prepare_out(cfg)
    dataset = load_dataset(args.dataset)
    model = _load_any_model(args.model)

    probs_cls, probs_zero = predict(model, dataset.data)
    report = compute_metrics(dataset.labels, probs_cls, dataset.classes)
    _write_csv(out / "metrics.csv", report_rows(report))
    _write_csv(out / "confusion.csv",
               [[""] + report.class_names]
               + [[name] + [str(int(v)) for v in row]
                  for name, row in zip(report.class_names, report.confusion)])
    roc_rows = [["class", "threshold", "fpr", "tpr"]]
    for k, name in enumerate(report.class_names):
        for thr, fpr, tpr in roc_points(dataset.labels == k, probs_cls[:, k]):
            roc_rows.append([name, f"{thr}", f"{fpr:.6f}", f"{tpr:.6f}"])
    _write_csv(out / "roc_points.csv", roc_rows)
    if probs_zero is not None:
        zero_report = compute_metrics(dataset.labels, probs_zero, dataset.classes)
        _write_csv(out / "metrics_zeroshot.csv", report_rows(zero_report))
    print(f"overall: acc={report.overall['acc']:.4f} pre={report.overall['pre']:.4f} "
          f"rec={report.overall['rec']:.4f} spec={report.overall['spec']:.4f} "
          f"f1={report.overall['f1']:.4f} "
          f"macro_auc={report.macro_auc if report.macro_auc is not None else 'undefined'}")
    return 0


def cmd_ecam(args) -> int:
    from .ecam import ecam_rows
    from .rawio import load_dataset

    cfg = _load_run_config(args, required=False)
    out = _prepare_out(cfg)
    dataset = load_dataset(args.dataset)
    model = _load_any_model(args.model)
    batch = dataset.data[:args.limit]
    rows = ecam_rows(model, batch, dataset.channel_names, cfg.eval.ecam_method)
    _write_csv(out / "ecam.csv", rows)
    print(f"wrote channel attributions for {len(batch)} epochs to {out / 'ecam.csv'}")
    return 0


def cmd_report(args) -> int:
    from .eeg_encoder import count_flops, count_params, flops_dominated
    from .presets import student_paper_config, teacher_paper_config

    cfg = _load_run_config(args, required=False)
    out = _prepare_out(cfg)
    if args.config is not None:
        teacher_cfg, student_cfg = cfg.teacher, cfg.resolved_student()
    else:
        teacher_cfg, student_cfg = teacher_paper_config(), student_paper_config()
    batch = args.batch_size or cfg.eval.report_batch_size

    tp, sp = count_params(teacher_cfg), count_params(student_cfg)
    _write_csv(out / "params.csv", [["model", "params"],
                                    ["teacher", str(tp)], ["student", str(sp)],
                                    ["ratio", f"{sp / tp:.4f}"]])
    flops_rows = [["model", "layer", "flops", "cumulative"]]
    for name, series in (("teacher", count_flops(teacher_cfg, batch)),
                         ("student", count_flops(student_cfg, batch))):
        for entry in series:
            flops_rows.append([name, entry.layer, str(entry.flops), str(entry.cumulative)])
    _write_csv(out / "flops.csv", flops_rows)
    dominated = flops_dominated(teacher_cfg, student_cfg, batch)
    print(f"student/teacher parameter ratio: {sp / tp:.4f} "
          f"({sp} / {tp}); student cumulative FLOPs strictly below teacher "
          f"at every depth: {dominated}")

    if args.ablation:
        return _ablation_grid(args, cfg, out)
    return 0


def _ablation_grid(args, cfg, out: Path) -> int:
    from .config import ConfigError
    from .layers import parameter_manifest, trainable_count
    from .presets import ABLATION_VARIANTS, default_templates
    from .rawio import load_dataset
    from .trainer import TeacherModel, TrainRunConfig, fit

    if args.dataset is None:
        raise ConfigError("--ablation needs --dataset for the one-epoch smoke runs")
    dataset = load_dataset(args.dataset)
    templates = default_templates(dataset.classes)
    run_cfg = TrainRunConfig(**{**vars(cfg.trainer), "epochs": 1,
                                "early_stop_accuracy": None})
    rows = [["variant", "eeg_prompts", "text_prompt_mode", "trainable_params",
             "epoch_loss", "epoch_accuracy"]]
    manifests = {}
    from dataclasses import replace
    for name, (eeg_prompts, text_mode) in ABLATION_VARIANTS.items():
        text_cfg = replace(cfg.text, prompt_mode=text_mode)
        model = TeacherModel.build(dataset.classes, cfg.teacher, text_cfg, run_cfg,
                                   templates=templates, eeg_prompts=eeg_prompts)
        curves = fit(model, dataset.data, dataset.labels, run_cfg)
        manifests[name] = tuple(parameter_manifest(model.params()))
        rows.append([name, str(eeg_prompts), text_mode,
                     str(trainable_count(model.params())),
                     f"{curves[-1].loss:.6f}", f"{curves[-1].accuracy:.6f}"])
    _write_csv(out / "ablation.csv", rows)
    distinct = len(set(manifests.values())) == len(manifests)
    print(f"ablation grid: {len(manifests)} variants, parameter manifests all "
          f"distinct: {distinct}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
