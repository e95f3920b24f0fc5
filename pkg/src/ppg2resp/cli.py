"""Operator command line: synth, train, eval, interpret, bench.

Every command writes its artifacts plus a ``manifest.json`` (resolved
options, seed, sha256 of each artifact) into the output directory, so any
run can be reproduced bit-for-bit from its manifest. The manifest is the
only file that carries a timestamp; weight files, metrics, and CSVs are
pure functions of config and seed.

Exit codes: 0 success, 2 bad configuration, 3 data problems, 4 numeric
failures.
"""

import argparse
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, data, evaluation, interpret, training
from . import model as model_mod
from .errors import (
    BuildError,
    DataError,
    NumericError,
    ParameterError,
    PipelineError,
    ShapeError,
)

WEIGHT_SUFFIX = ".rspw"
EVAL_BATCH = 64


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir, command, options, artifacts):
    manifest = {
        "command": command,
        "version": __version__,
        "options": options,
        "artifacts": {name: _sha256(out_dir / name) for name in sorted(artifacts)},
        "created": datetime.now(timezone.utc).isoformat(),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def _options_dict(args):
    skip = {"func", "config"}
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        out[key] = str(value) if isinstance(value, Path) else value
    return out


def _out_dir(args, command):
    if args.out is not None:
        out = Path(args.out)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / f"{command}-{stamp}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_range(text, name):
    parts = text.split(",")
    if len(parts) != 2:
        raise ParameterError(f"{name} must be 'lo,hi', got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise ParameterError(f"{name} must be numeric, got {text!r}") from None


def _net_predictor(model):
    def predict(batch):
        outs = []
        for lo in range(0, len(batch), EVAL_BATCH):
            x = np.asarray(batch[lo : lo + EVAL_BATCH])[:, None, :]
            y, _, _ = model_mod.forward_batch(model, x)
            outs.append(y[:, 0, :])
        return np.concatenate(outs)

    return predict


def _window_segments(seconds):
    n = round(seconds - 9.6) + 1
    if n < 1 or abs((n - 1) * 1.0 + 9.6 - seconds) > 0.5:
        raise ParameterError(
            f"window of {seconds} s does not fit the 9.6 s + 1 s/segment grid"
        )
    return n


def cmd_synth(args):
    out = _out_dir(args, "synth")
    config = data.SynthConfig(
        n_subjects=args.n_subjects,
        duration_s=args.duration,
        heart_rate_bpm=_parse_range(args.hr_range, "--hr-range"),
        resp_rate_bpm=_parse_range(args.rr_range, "--rr-range"),
        duty_cycle=_parse_range(args.duty_range, "--duty-range"),
        depth_intensity=args.depth_intensity,
        depth_amplitude=args.depth_amplitude,
        depth_interval=args.depth_interval,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    recordings = data.generate_synthetic(config)
    artifacts = []
    for rec in recordings:
        name = f"{rec.subject_id}.csv"
        data.write_recording_csv(rec, out / name)
        artifacts.append(name)
        artifacts.append(f"{rec.subject_id}.rr.csv")
    _write_manifest(out, "synth", _options_dict(args), artifacts)
    print(f"wrote {len(recordings)} recordings to {out}")
    return 0


def _train_config(args):
    return training.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        dropout_keep=args.dropout_keep,
        input_norm=args.input_norm,
    )


def _write_loss_csv(path, history):
    rows = ["epoch,loss"]
    for i, loss in enumerate(history):
        rows.append(f"{i},{float(loss)!r}")
    path.write_text("\n".join(rows) + "\n")


def cmd_train(args):
    out = _out_dir(args, "train")
    recordings = data.load_dataset(args.data)
    config = _train_config(args)
    base = model_mod.load_weights(args.init_weights) if args.init_weights else None
    artifacts = []
    if args.no_loso:
        if base is not None:
            model, history = training.transfer_retrain(base, recordings, config)
        else:
            model = model_mod.build_model(rng_seed=config.seed)
            segments = training.training_segments(
                recordings, input_norm=config.input_norm
            )
            model, history = training.train(model, segments, config)
        name = f"model{WEIGHT_SUFFIX}"
        model_mod.save_weights(model, out / name)
        _write_loss_csv(out / "loss.csv", history)
        artifacts += [name, "loss.csv"]
        folds_rows = [
            "fold,held_out,weights,final_loss,wall_clock_s,train_subjects",
            f"0,,{name},{history[-1] if history else ''},,"
            + "|".join(r.subject_id for r in recordings),
        ]
    else:
        folds = training.loso_cv(
            recordings, config, jobs=args.jobs, base_model=base
        )
        folds_rows = [
            "fold,held_out,weights,final_loss,wall_clock_s,train_subjects"
        ]
        for i, fold in enumerate(folds):
            name = f"fold-{fold.held_out_subject}{WEIGHT_SUFFIX}"
            model_mod.save_weights(fold.model, out / name)
            _write_loss_csv(out / f"loss-{fold.held_out_subject}.csv",
                            fold.loss_history)
            artifacts += [name, f"loss-{fold.held_out_subject}.csv"]
            final = fold.loss_history[-1] if fold.loss_history else ""
            folds_rows.append(
                f"{i},{fold.held_out_subject},{name},{final},"
                f"{fold.wall_clock_s:.1f},"
                + "|".join(fold.train_subjects)
            )
            print(
                f"fold {fold.held_out_subject}: final loss {final}, "
                f"{fold.wall_clock_s:.1f} s"
            )
    (out / "folds.csv").write_text("\n".join(folds_rows) + "\n")
    artifacts.append("folds.csv")
    _write_manifest(out, "train", _options_dict(args), artifacts)
    print(f"training artifacts in {out}")
    return 0


def _load_fold_map(weights_path):
    """Map held-out subject -> (weight file, train subjects) from folds.csv."""
    weights_path = Path(weights_path)
    folds_csv = (
        weights_path / "folds.csv"
        if weights_path.is_dir()
        else weights_path.parent / "folds.csv"
    )
    if not folds_csv.exists():
        return {}
    fold_map = {}
    lines = folds_csv.read_text().strip().splitlines()
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) < 6:
            continue
        held_out, weights, train = parts[1], parts[2], parts[5]
        fold_map[held_out] = (weights, train.split("|") if train else [])
    return fold_map


def _model_for_subject(weights_path, subject_id, fold_map, cache):
    weights_path = Path(weights_path)
    if weights_path.is_dir():
        if subject_id in fold_map:
            target = weights_path / fold_map[subject_id][0]
        else:
            target = weights_path / f"fold-{subject_id}{WEIGHT_SUFFIX}"
            if not target.exists():
                single = sorted(weights_path.glob(f"*{WEIGHT_SUFFIX}"))
                if len(single) == 1:
                    target = single[0]
                else:
                    raise DataError(
                        f"no weight file for subject {subject_id} in {weights_path}"
                    )
    else:
        target = weights_path
    key = str(target)
    if key not in cache:
        cache[key] = model_mod.load_weights(target)
    train_subjects = []
    for held_out, (weights, train) in fold_map.items():
        if str(weights_path / weights if weights_path.is_dir() else weights_path) == key:
            train_subjects = train
            break
    return cache[key], target, train_subjects


def _check_leakage(subject_id, train_subjects, weight_file):
    if subject_id in train_subjects:
        print(
            f"warning: subject {subject_id} was in the training set of "
            f"{weight_file}; metrics are not held-out",
            file=sys.stderr,
        )


def _evaluate_all(recordings, predictor_for, window_list, input_norm="zscore"):
    window_segs = [_window_segments(s) for s in window_list]
    per_subject = {}
    for rec in recordings:
        predict = predictor_for(rec)
        per_subject[rec.subject_id] = evaluation.evaluate_recording(
            predict, rec, window_segments=window_segs, input_norm=input_norm
        )
    blocks = {}
    for seconds, n_seg in zip(window_list, window_segs):
        errors = {
            s: r["windows"][n_seg]["rr_abs_errors"]
            for s, r in per_subject.items()
        }
        duty = {
            s: r["windows"][n_seg]["duty_pairs"] for s, r in per_subject.items()
        }
        waveform = {s: r["waveform_mae"] for s, r in per_subject.items()}
        report = evaluation.aggregate_metrics(
            errors, waveform_mae_by_subject=waveform, duty_pairs_by_subject=duty
        )
        blocks[f"{seconds:g}s"] = json.loads(report.to_json())
    return per_subject, blocks


def cmd_eval(args):
    out = _out_dir(args, "eval")
    recordings = data.load_dataset(args.data)
    window_list = [float(w) for w in args.windows.split(",")]
    weights_path = Path(args.weights)
    if not weights_path.exists():
        raise DataError(f"weights path {weights_path} does not exist")
    fold_map = _load_fold_map(weights_path)
    cache = {}

    def predictor_for(rec):
        model, target, train_subjects = _model_for_subject(
            weights_path, rec.subject_id, fold_map, cache
        )
        _check_leakage(rec.subject_id, train_subjects, target.name)
        return _net_predictor(model)

    per_subject, blocks = _evaluate_all(
        recordings, predictor_for, window_list, input_norm=args.input_norm
    )
    payload = {"model": blocks}

    if args.baseline == "pls":
        by_id = {r.subject_id: r for r in recordings}
        pls_cache = {}

        def pls_predictor_for(rec):
            train_ids = tuple(
                sorted(i for i in by_id if i != rec.subject_id)
            )
            if train_ids not in pls_cache:
                segments = training.training_segments(
                    [by_id[i] for i in train_ids], input_norm=args.input_norm
                )
                X = np.stack([p.input for p in segments])
                Y = np.stack([p.target for p in segments])
                pls_cache[train_ids] = evaluation.pls_train(
                    X, Y, n_components=args.pls_components
                )
            pls_model = pls_cache[train_ids]
            return lambda batch: evaluation.pls_predict(pls_model, batch)

        _, pls_blocks = _evaluate_all(
            recordings, pls_predictor_for, window_list, input_norm=args.input_norm
        )
        payload["pls"] = pls_blocks

    artifacts = ["metrics.json"]
    (out / "metrics.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )
    n_seg_first = _window_segments(window_list[0])
    trace_rows = ["subject,window_start_s,rr_est,rr_ref,abs_err"]
    for subject in sorted(per_subject):
        for start_s, rr_est, rr_ref, abs_err in per_subject[subject]["windows"][
            n_seg_first
        ]["trace_rows"]:
            trace_rows.append(
                f"{subject},{start_s:g},{float(rr_est)!r},"
                f"{float(rr_ref)!r},{float(abs_err)!r}"
            )
    (out / "rr_windows.csv").write_text("\n".join(trace_rows) + "\n")
    artifacts.append("rr_windows.csv")
    for subject in sorted(per_subject):
        fused = per_subject[subject]["fused"]
        ref = per_subject[subject]["reference"]
        rows = ["sample,estimate,reference"]
        rows += [
            f"{i},{float(v)!r},{float(r)!r}"
            for i, (v, r) in enumerate(zip(fused, ref))
        ]
        name = f"fused-{subject}.csv"
        (out / name).write_text("\n".join(rows) + "\n")
        artifacts.append(name)
    _write_manifest(out, "eval", _options_dict(args), artifacts)
    for name, block in payload["model"].items():
        print(
            f"{name}: mAE {block['mae_bpm']:.3f} bpm, "
            f"mMAE {block['mmae_bpm']:.3f} bpm"
        )
    print(f"evaluation artifacts in {out}")
    return 0


def cmd_interpret(args):
    out = _out_dir(args, "interpret")
    recordings = data.load_dataset(args.data)
    model = model_mod.load_weights(args.weights)
    distribution, attributions, skipped = interpret.kernel_rr_distribution(
        model, recordings, method=args.method
    )
    rows = ["kernel_index,rr_bpm"]
    rows += [
        f"{k},{float(rr)!r}" for k, rr in interpret.distribution_rows(distribution)
    ]
    (out / "kernel_rr.csv").write_text("\n".join(rows) + "\n")
    wrows = ["kernel_index,sample,weight,smoothed_weight"]
    wrows += [
        f"{k},{i},{float(w)!r},{float(s)!r}"
        for k, i, w, s in interpret.kernel_weight_rows(model)
    ]
    (out / "kernel_weights.csv").write_text("\n".join(wrows) + "\n")
    _write_manifest(
        out, "interpret", _options_dict(args), ["kernel_rr.csv", "kernel_weights.csv"]
    )
    medians = {
        k: float(np.median(v)) for k, v in distribution.items() if v
    }
    print(f"attributed {len(attributions)} windows, skipped {skipped}")
    for k in sorted(medians):
        print(f"kernel {k}: {len(distribution[k])} windows, "
              f"median RR {medians[k]:.1f} bpm")
    print(f"interpretation artifacts in {out}")
    return 0


def cmd_bench(args):
    out = _out_dir(args, "bench")
    if args.weights:
        model = model_mod.load_weights(args.weights)
    else:
        model = model_mod.build_model(rng_seed=args.seed)
    rng = np.random.default_rng(args.seed)
    window = rng.standard_normal(model.config.window_len)
    model_mod.forward(model, window)
    times = np.empty(args.iterations)
    t_all = time.perf_counter()
    for i in range(args.iterations):
        t0 = time.perf_counter()
        model_mod.forward(model, window)
        times[i] = time.perf_counter() - t0
    wall = time.perf_counter() - t_all
    per_window_s = model.config.window_len / 30.0
    windows_per_s = args.iterations / wall
    report = {
        "iterations": int(args.iterations),
        "mean_ms": float(times.mean() * 1e3),
        "p95_ms": float(np.percentile(times, 95) * 1e3),
        "windows_per_second": float(windows_per_s),
        "waveform_seconds_per_second": float(windows_per_s * per_window_s),
        "waveform_hours_per_second": float(windows_per_s * per_window_s / 3600),
    }
    (out / "bench.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    _write_manifest(out, "bench", _options_dict(args), ["bench.json"])
    print(
        f"mean {report['mean_ms']:.3f} ms, p95 {report['p95_ms']:.3f} ms, "
        f"{report['waveform_hours_per_second']:.2f} h of waveform per second"
    )
    return 0


def _load_config_file(path):
    values = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{i}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ppg2resp",
        description="PPG to respiratory waveform: synthesize, train, evaluate, "
        "interpret, benchmark.",
    )
    parser.add_argument(
        "--config", help="text file of key = value defaults; flags win"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--out", help="output directory")
    p_synth.add_argument("--n-subjects", type=int, default=3)
    p_synth.add_argument("--duration", type=float, default=480.0)
    p_synth.add_argument("--hr-range", default="70,110")
    p_synth.add_argument("--rr-range", default="8,30")
    p_synth.add_argument("--duty-range", default="0.3,0.7")
    p_synth.add_argument("--depth-intensity", type=float, default=0.6)
    p_synth.add_argument("--depth-amplitude", type=float, default=0.25)
    p_synth.add_argument("--depth-interval", type=float, default=0.05)
    p_synth.add_argument("--noise-std", type=float, default=0.05)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train fold models (LOSO) or one model")
    p_train.add_argument("--data", required=True, help="dataset directory")
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--no-loso", action="store_true",
                         help="train one model on every subject")
    p_train.add_argument("--init-weights",
                         help="start from these weights (transfer retraining)")
    p_train.add_argument("--jobs", type=int, default=1,
                         help="parallel folds (default 1, deterministic order)")
    p_train.add_argument("--lr", type=float, default=1e-3)
    p_train.add_argument("--batch-size", type=int, default=32)
    p_train.add_argument("--epochs", type=int, default=200)
    p_train.add_argument("--dropout-keep", type=float, default=0.5)
    p_train.add_argument("--input-norm", default="zscore",
                         choices=["zscore", "minmax", "raw"])
    p_train.add_argument("--seed", type=int, default=0)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="metrics for trained weights")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--weights", required=True,
                        help="weight file, or directory of fold weights")
    p_eval.add_argument("--windows", default="30.6,60.6",
                        help="evaluation window lengths in seconds")
    p_eval.add_argument("--baseline", choices=["none", "pls"], default="none")
    p_eval.add_argument("--pls-components", type=int, default=25)
    p_eval.add_argument("--input-norm", default="zscore",
                        choices=["zscore", "minmax", "raw"])
    p_eval.add_argument("--out", help="output directory")
    p_eval.set_defaults(func=cmd_eval)

    p_int = sub.add_parser("interpret", help="kernel attribution exports")
    p_int.add_argument("--data", required=True)
    p_int.add_argument("--weights", required=True, help="one weight file")
    p_int.add_argument("--method", choices=["chain", "layer1"], default="chain")
    p_int.add_argument("--out", help="output directory")
    p_int.set_defaults(func=cmd_interpret)

    p_bench = sub.add_parser("bench", help="single-window forward latency")
    p_bench.add_argument("--weights", help="weight file (default: fresh init)")
    p_bench.add_argument("--iterations", type=int, default=10000)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", help="output directory")
    p_bench.set_defaults(func=cmd_bench)
    return parser


def _apply_config_file(parser, argv):
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    values = _load_config_file(known.config)
    for action_parser in parser._subparsers._group_actions[0].choices.values():
        defaults = {}
        for action in action_parser._actions:
            if action.dest in values:
                raw = values[action.dest]
                if action.type is not None:
                    raw = action.type(raw)
                elif isinstance(action.const, bool) or isinstance(
                    action.default, bool
                ):
                    raw = raw.lower() in ("1", "true", "yes", "on")
                defaults[action.dest] = raw
        action_parser.set_defaults(**defaults)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except (ParameterError, BuildError, ShapeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
