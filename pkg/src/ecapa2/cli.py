"""Command-line entry point: ``ecapa2 <subcommand> [options]``.

Every subcommand reads an optional JSON config (sections named after the
option groups listed by ``--help``), honors ``--seed``, writes artifacts under
``--out-dir`` and prints a one-line JSON summary.  Exit codes: 0 success,
1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SUBCOMMANDS = ("synth-data", "train", "finetune", "embed", "score", "eval", "erf", "conduct",
               "ablate", "make-overlap", "make-short")
ARCHS = ("ecapa2", "tdnn", "resnet")
CHECKPOINT_NAME = "checkpoint.ecp"

log = logging.getLogger("ecapa2")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class ScoreOptions:
    snorm: bool = True
    top_k: int = 500
    calibrate: bool = True
    use_durations: bool = True
    l2: float = 1e-3
    p_target: float = 0.01


@dataclass
class ErfOptions:
    frames: int = 101
    seeds: int = 32
    layer: str = "prepool"
    input_kind: str = "noise"


@dataclass
class ConductOptions:
    steps: int = 300
    chunk: int = 25
    layer: str = "prepool"
    channel: int = -1


@dataclass
class AblateOptions:
    axis: str = "freq_bins"
    sizes: list = field(default_factory=lambda: [0, 4, 8, 16, 24, 32, 48])
    repeats: int = 1
    both_sides: bool = False


@dataclass
class OverlapOptions:
    lam_range: list = field(default_factory=lambda: [0.3, 0.7])


@dataclass
class ShortOptions:
    min_s: float = 0.5
    max_s: float = 2.0
    both_sides: bool = True


def _config_sections() -> dict:
    from .interpret import StandinConfig
    from .model import Ecapa2Config
    from .synth import SynthCorpusSpec
    from .training import TrainConfig
    return {
        "corpus": SynthCorpusSpec, "model": Ecapa2Config, "standin": StandinConfig,
        "train": TrainConfig, "finetune": TrainConfig, "score": ScoreOptions, "erf": ErfOptions,
        "conduct": ConductOptions, "ablate": AblateOptions, "overlap": OverlapOptions,
        "short": ShortOptions,
    }


def _defaults(cls, section: str) -> dict:
    if section == "finetune":
        from .training import TrainConfig
        return TrainConfig.preset("lm_ft").to_dict()
    obj = cls()
    return obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)


def config_help() -> str:
    lines = ["config keys (JSON sections, defaults shown; top-level \"arch\": "
             f"one of {', '.join(ARCHS)}):"]
    for section, cls in _config_sections().items():
        lines.append(f"  [{section}]")
        for key, value in _defaults(cls, section).items():
            lines.append(f"    {key} = {json.dumps(value)}")
    return "\n".join(lines)


class _HelpFormatter(argparse.RawDescriptionHelpFormatter):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser(epilog: str = "") -> argparse.ArgumentParser:
    parser = _Parser(prog="ecapa2", description=__doc__, epilog=epilog,
                     formatter_class=_HelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                           formatter_class=_HelpFormatter)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
        p.add_argument("--out-dir", type=Path, default=None,
                       help="output directory (default $ECAPA2_OUT_DIR or .)")
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS threads (default $ECAPA2_THREADS or 1)")
        p.add_argument("--figures", action="store_true", help="also render PNG figures")
        return p

    add("synth-data", "generate the synthetic multi-speaker corpus")
    p = add("train", "initial training stage on a corpus")
    p.add_argument("--data", type=Path, required=True)
    p = add("finetune", "large-margin fine-tuning of a checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p = add("embed", "embed every WAV below a directory")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p = add("score", "score a trial list")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--trials", type=Path, default=None, help="default <data>/trials.txt")
    p.add_argument("--cohort-data", type=Path, default=None,
                   help="corpus whose training speakers form the s-norm cohort (default --data)")
    p.add_argument("--calibration-trials", type=Path, default=None,
                   help="trial list (within --data) used to fit calibration")
    p = add("eval", "EER and MinDCF of a score CSV")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--column", default=None, help="score column (default: last numeric column)")
    p = add("erf", "effective receptive field of a randomly initialized architecture")
    p = add("conduct", "neuron conductance map for one utterance")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--wav", type=Path, required=True)
    p = add("ablate", "EER under growing input masks")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--trials", type=Path, default=None)
    p = add("make-overlap", "trial set with interfering-speaker mixtures")
    p.add_argument("--data", type=Path, required=True)
    p = add("make-short", "trial set with 0.5-2 s crops")
    p.add_argument("--data", type=Path, required=True)
    return parser


# -- helpers ------------------------------------------------------------------------

def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(cfg) - set(_config_sections()) - {"arch"}
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    return cfg


def _section(cfg: dict, name: str, seed: int | None = None):
    cls = _config_sections()[name]
    values = dict(cfg.get(name, {}))
    if seed is not None and "seed" in {f.name for f in dataclasses.fields(cls)}:
        values["seed"] = seed
    try:
        if name in ("train", "finetune"):
            return cls.preset("lm_ft" if name == "finetune" else "initial", **values)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown keys in [{name}]: {sorted(unknown)}")
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid [{name}] config: {exc}") from None


def _arch(cfg: dict) -> str:
    arch = cfg.get("arch", "ecapa2")
    if arch not in ARCHS:
        raise UsageError(f"arch must be one of {ARCHS}")
    return arch


def _build_model(cfg: dict, seed: int):
    from .interpret import Resnet2dStack, build_analysis_standins
    from .model import Ecapa2Model
    arch = _arch(cfg)
    if arch == "ecapa2":
        return Ecapa2Model(_section(cfg, "model"), seed=seed)
    tdnn, resnet = build_analysis_standins(_section(cfg, "standin"), seed)
    return tdnn if arch == "tdnn" else resnet


def _save_model(path: Path, model, extra: dict, tensors: dict | None = None) -> None:
    from .model import save_checkpoint
    extra = dict(extra)
    if hasattr(model, "channels"):
        extra["channels"] = model.channels
    save_checkpoint(path, model, extra=extra, tensors=tensors)


def _load_model(path: Path):
    from .interpret import load_standin
    from .model import Ecapa2Config, Ecapa2Model, read_checkpoint
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} not found")
    header, arrays = read_checkpoint(path)
    kind = header.get("model_class")
    if kind == "Ecapa2Model":
        model = Ecapa2Model(Ecapa2Config.from_dict(header["config"]))
        own = set(model.state_dict())
        model.load_state_dict({k: v for k, v in arrays.items() if k in own})
        model.eval()
    else:
        model = load_standin(header, arrays)
    own = set(model.state_dict())
    return model, header, {k: v for k, v in arrays.items() if k not in own}


def _read_audio(root: Path) -> dict:
    from .fileio import read_wav
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data directory {root} not found")
    audio = {}
    for p in sorted(root.rglob("*.wav")):
        key = p.relative_to(root).as_posix()
        audio[key] = read_wav(p).replace(source_path=key)
    if not audio:
        raise DataError(f"no WAV files below {root}")
    return audio


def _read_meta(root: Path) -> dict:
    path = Path(root) / "corpus.json"
    return json.loads(path.read_text()) if path.exists() else {}


def _trial_set(root: Path, trials_path: Path | None, audio: dict):
    from .fileio import read_trials
    from .scoring import TrialSet
    path = trials_path or Path(root) / "trials.txt"
    if not Path(path).is_file():
        raise DataError(f"trial list {path} not found")
    trials = read_trials(path)
    missing = {k for t in trials for k in (t.enroll, t.test)} - set(audio)
    if missing:
        raise DataError(f"trial list references {len(missing)} missing files, "
                        f"e.g. {sorted(missing)[0]}")
    normalize = _read_meta(root).get("normalize", True)
    return TrialSet(trials, audio, normalize=normalize)


def _training_data(root: Path, speed_aug: bool):
    from .training import TrainingData
    audio = _read_audio(root)
    meta = _read_meta(root)
    keep = set(meta.get("train_speakers", [])) or None
    groups = {}
    for key, w in audio.items():
        if keep is None or w.speaker_id in keep:
            groups.setdefault(w.speaker_id, []).append(w)
    return TrainingData(groups, speed_aug), audio


def _eval_fn(root: Path, audio: dict):
    """Cosine EER on the corpus trial list, when one exists."""
    from .model import embed_many
    from .scoring import score_trials
    path = Path(root) / "trials.txt"
    if not path.is_file():
        return None
    ts = _trial_set(root, path, audio)
    keys = {k for t in ts.trials for k in (t.enroll, t.test)}

    def fn(model, step):
        embs = embed_many(model, {k: audio[k] for k in keys})
        return score_trials(ts.trials, embs, normalize=False).eer_percent

    return fn


def _out_dir(args) -> Path:
    out = args.out_dir or Path(os.environ.get("ECAPA2_OUT_DIR", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands --------------------------------------------------------------------

def cmd_synth_data(args, cfg, out):
    from .synth import envelope_correlations, generate_corpus, write_corpus
    spec = _section(cfg, "corpus", args.seed)
    corpus = generate_corpus(spec)
    write_corpus(corpus, out)
    same, cross = envelope_correlations(corpus)
    return {"speakers": len(corpus.speakers), "utterances": len(corpus.utterances),
            "trials": len(corpus.trials), "envelope_corr_same": same,
            "envelope_corr_cross": cross, "out_dir": str(out)}


def _run_training(args, cfg, out, stage: str):
    from .training import train_loop
    section = "finetune" if stage == "lm_ft" else "train"
    tc = _section(cfg, section, args.seed)
    data, audio = _training_data(args.data, tc.speed_aug)
    classifier = None
    if stage == "lm_ft":
        from . import tensor as T
        model, header, extra = _load_model(args.checkpoint)
        if "classifier.W" not in extra:
            raise DataError(f"{args.checkpoint} carries no classifier weights")
        classifier = T.parameter(extra["classifier.W"])
        saved_ids = header.get("extra", {}).get("class_ids")
        if saved_ids is not None and saved_ids != data.class_ids():
            raise DataError("fine-tuning data classes differ from the checkpoint's")
    else:
        model = _build_model(cfg, tc.seed)
    bank = None
    if tc.augment:
        from .features import AugmentBank
        noise = os.environ.get("ECAPA2_NOISE_DIR")
        rir = os.environ.get("ECAPA2_RIR_DIR")
        bank = AugmentBank.from_dirs(noise, rir) if (noise or rir) else None
    result = train_loop(data, model, tc, classifier=classifier, augment_bank=bank,
                        eval_fn=_eval_fn(args.data, audio) if tc.eval_every else None,
                        log=lambda m: log.debug("step %d loss %.4f", m["step"], m["loss"]))
    name = "finetuned.ecp" if stage == "lm_ft" else CHECKPOINT_NAME
    _save_model(out / name, result.model,
                {"train_config": tc.to_dict(), "class_ids": result.class_ids, "stage": stage},
                {"classifier.W": result.classifier})
    prefix = "finetune_" if stage == "lm_ft" else ""
    result.write_metrics(out / f"{prefix}metrics.csv")
    if result.evals:
        result.write_evals(out / f"{prefix}evals.csv")
    if args.figures:
        from .plotting import plot_training
        plot_training(result.metrics, out / "figures" / f"{prefix}training.png", result.evals)
    summary = {"stage": stage, "steps": len(result.metrics),
               "first_loss": result.metrics[0]["loss"], "last_loss": result.metrics[-1]["loss"],
               "mixup_batches": result.mixup_batches,
               "spec_augment_calls": result.spec_augment_calls,
               "checkpoint": str(out / name)}
    if result.evals:
        summary["eer"] = result.evals[-1]["eer"]
    return summary


def cmd_train(args, cfg, out):
    return _run_training(args, cfg, out, "initial")


def cmd_finetune(args, cfg, out):
    return _run_training(args, cfg, out, "lm_ft")


def cmd_embed(args, cfg, out):
    from .fileio import write_rows_csv
    from .model import embed_many
    model, _, _ = _load_model(args.checkpoint)
    embs = embed_many(model, _read_audio(args.data))
    dim = len(next(iter(embs.values())))
    write_rows_csv(out / "embeddings.csv", ["key"] + [f"e{i}" for i in range(dim)],
                   [[k] + [float(v) for v in vec] for k, vec in embs.items()])
    return {"embeddings": len(embs), "dim": dim, "path": str(out / "embeddings.csv")}


def _cohort(model, root: Path):
    from .model import embed_many
    from .scoring import build_cohort
    meta = _read_meta(root)
    speakers = set(meta.get("train_speakers", []))
    if not speakers:
        return None
    audio = {k: w for k, w in _read_audio(root).items() if w.speaker_id in speakers}
    embs = embed_many(model, audio)
    by_spk = {}
    for k, vec in embs.items():
        by_spk.setdefault(audio[k].speaker_id, []).append(vec)
    return build_cohort(by_spk)


def cmd_score(args, cfg, out):
    from .model import embed_many
    from .scoring import Calibrator, durations_of, score_trials
    opts = _section(cfg, "score")
    model, _, _ = _load_model(args.checkpoint)
    audio = _read_audio(args.data)
    ts = _trial_set(args.data, args.trials, audio)
    cal_ts = (_trial_set(args.data, args.calibration_trials, audio)
              if args.calibration_trials else None)
    keys = {k for t in ts.trials for k in (t.enroll, t.test)}
    if cal_ts is not None:
        keys |= {k for t in cal_ts.trials for k in (t.enroll, t.test)}
    embs = embed_many(model, {k: audio[k] for k in keys})
    durations = durations_of(audio)
    normalize = ts.normalize
    cohort = _cohort(model, args.cohort_data or args.data) if opts.snorm and normalize else None
    calibrator = None
    if opts.calibrate and normalize and cal_ts is not None:
        fit = score_trials(cal_ts.trials, embs, durations, cohort, opts.top_k, normalize=True)
        d = [(durations[t.enroll], durations[t.test]) for t in cal_ts.trials]
        calibrator = Calibrator.fit(fit.snorm, d, [t.label for t in cal_ts.trials], opts.l2,
                                    opts.use_durations)
    report = score_trials(ts.trials, embs, durations, cohort, opts.top_k, calibrator, normalize,
                          config={"score": dataclasses.asdict(opts), "seed": args.seed})
    report.write(out / "scores.csv", out / "score_summary.json")
    if args.figures:
        from .plotting import plot_scores
        used = {"raw": report.raw, "snorm": report.snorm, "calibrated": report.calibrated}
        plot_scores(used[report.final], [t.label for t in ts.trials],
                    out / "figures" / "scores.png", f"EER {report.eer_percent:.2f}%")
    return report.summary()


def cmd_eval(args, cfg, out):
    import numpy as np

    from .fileio import read_rows_csv
    from .scoring import compute_eer, compute_mindcf
    opts = _section(cfg, "score")
    if not Path(args.scores).is_file():
        raise DataError(f"score file {args.scores} not found")
    rows = read_rows_csv(args.scores)
    if not rows:
        raise DataError(f"{args.scores} holds no scores")
    columns = list(rows[0])
    if "label" in columns:
        labels = [int(r["label"]) for r in rows]
    elif "trial" in columns:
        labels = [int(r["trial"].split()[0]) for r in rows]
    else:
        raise DataError("score CSV needs a 'label' or 'trial' column")
    column = args.column or next(c for c in reversed(columns) if c not in ("label", "trial"))
    if column not in columns:
        raise DataError(f"no column {column!r} in {args.scores}")
    scores = np.array([float(r[column]) for r in rows])
    eer, thr = compute_eer(scores, labels)
    summary = {"eer": eer, "min_dcf": compute_mindcf(scores, labels, opts.p_target),
               "threshold_at_eer": thr, "num_trials": len(rows), "column": column}
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    if args.figures:
        from .plotting import plot_scores
        plot_scores(scores, labels, out / "figures" / "eval_scores.png", f"EER {eer:.2f}%")
    return summary


def cmd_erf(args, cfg, out):
    from .fileio import write_rows_csv
    from .interpret import compute_erf, erf_frequency_profile
    opts = _section(cfg, "erf")
    arch = _arch(cfg)
    base_seed = args.seed or 0
    if arch == "ecapa2":
        model_cfg = _section(cfg, "model")
        model_cfg.striding_enabled = False
        bins = model_cfg.input_bins
    else:
        bins = _section(cfg, "standin").input_bins

    def factory(s):
        from .model import Ecapa2Model
        if arch == "ecapa2":
            return Ecapa2Model(model_cfg, seed=base_seed * 100_003 + s)
        return _build_model(dict(cfg, standin={**cfg.get("standin", {}),
                                               "freq_strides_2d": []}),
                            base_seed * 100_003 + s)

    amap = compute_erf(factory, (bins, opts.frames), opts.seeds, layer=opts.layer,
                       input_kind=opts.input_kind)
    amap.write(out / "erf.csv", out / "erf.pgm")
    profile, score = erf_frequency_profile(amap)
    write_rows_csv(out / "erf_profile.csv", ["bin", "value"],
                   [(i, float(v)) for i, v in enumerate(profile)])
    if args.figures:
        from .plotting import plot_attribution, plot_profile
        plot_attribution(amap.values, out / "figures" / "erf.png", f"ERF ({arch})")
        plot_profile({arch: profile}, out / "figures" / "erf_profile.png",
                     f"uniformity {score:.3f}")
    return {"arch": arch, "uniformity": score, "target": list(amap.target),
            "model_hash": amap.model_hash, "path": str(out / "erf.csv")}


def cmd_conduct(args, cfg, out):
    import numpy as np

    from . import tensor as T
    from .features import stft_features
    from .fileio import read_wav
    from .interpret import _feature_kind, neuron_conductance
    opts = _section(cfg, "conduct")
    model, _, _ = _load_model(args.checkpoint)
    if not Path(args.wav).is_file():
        raise DataError(f"{args.wav} not found")
    fmap = stft_features(read_wav(args.wav), _feature_kind(model))
    target = None
    with T.no_grad():
        h = getattr(model, opts.layer)(fmap.bins[None]).data[0]
    center = tuple(s // 2 for s in h.shape[1:])
    channel = opts.channel if opts.channel >= 0 else int(np.argmax(h[(slice(None),) + center]))
    target = (channel,) + center
    amap, reference = neuron_conductance(model, fmap, None, target, opts.steps, opts.layer,
                                         chunk=opts.chunk, return_reference=True)
    amap.write(out / "conductance.csv", out / "conductance.pgm")
    if args.figures:
        from .plotting import plot_attribution
        plot_attribution(amap.values, out / "figures" / "conductance.png",
                         "neuron conductance", cmap="RdBu_r")
    total = float(amap.values.sum())
    return {"target": list(amap.target), "sum": total, "reference": reference,
            "relative_error": abs(total - reference) / max(abs(reference), 1e-300),
            "model_hash": amap.model_hash, "path": str(out / "conductance.csv")}


def cmd_ablate(args, cfg, out):
    from .interpret import ablation_sweep
    opts = _section(cfg, "ablate")
    model, _, _ = _load_model(args.checkpoint)
    audio = _read_audio(args.data)
    ts = _trial_set(args.data, args.trials, audio)
    curve = ablation_sweep(model, ts, opts.axis, opts.sizes, args.seed or 0, opts.repeats,
                           opts.both_sides)
    curve.write(out / "ablation.csv")
    if args.figures:
        from .plotting import plot_ablation
        plot_ablation({type(model).__name__: curve}, out / "figures" / "ablation.png")
    return {"axis": curve.axis, "sizes": curve.sizes.tolist(), "eer": curve.eers.tolist(),
            "path": str(out / "ablation.csv")}


def _write_trialset(out: Path, ts, extra_meta: dict) -> None:
    from .fileio import write_trials, write_wav
    rename = {}
    for key in sorted(ts.audio):
        base, _, tag = key.partition("#")
        name = base if not tag else base[:-4] + f"_{tag}.wav"
        rename[key] = name
        write_wav(out / name, ts.audio[key])
    trials = [dataclasses.replace(t, enroll=rename[t.enroll], test=rename[t.test])
              for t in ts.trials]
    write_trials(out / "trials.txt", trials)
    meta = {"normalize": ts.normalize, **extra_meta}
    (out / "corpus.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def cmd_make_overlap(args, cfg, out):
    import numpy as np

    from .scoring import build_overlapped_trials
    opts = _section(cfg, "overlap")
    audio = _read_audio(args.data)
    ts = _trial_set(args.data, None, audio)
    meta = _read_meta(args.data)
    pool_ids = set(meta.get("train_speakers", []))
    if not pool_ids:
        raise DataError("corpus.json lists no training speakers for the interferer pool")
    pool = [w for k, w in audio.items() if w.speaker_id in pool_ids]
    rng = np.random.default_rng([args.seed or 0, 11])
    mixed = build_overlapped_trials(ts, pool, rng, tuple(opts.lam_range))
    _write_trialset(out, mixed, {"source": str(args.data), "kind": "overlap"})
    return {"trials": len(mixed.trials), "files": len(mixed.audio), "out_dir": str(out)}


def cmd_make_short(args, cfg, out):
    import numpy as np

    from .scoring import build_short_trials
    opts = _section(cfg, "short")
    audio = _read_audio(args.data)
    ts = _trial_set(args.data, None, audio)
    rng = np.random.default_rng([args.seed or 0, 13])
    short = build_short_trials(ts, rng, opts.min_s, opts.max_s, opts.both_sides)
    _write_trialset(out, short, {"source": str(args.data), "kind": "short"})
    return {"trials": len(short.trials), "files": len(short.audio), "out_dir": str(out)}


COMMANDS = {
    "synth-data": cmd_synth_data, "train": cmd_train, "finetune": cmd_finetune,
    "embed": cmd_embed, "score": cmd_score, "eval": cmd_eval, "erf": cmd_erf,
    "conduct": cmd_conduct, "ablate": cmd_ablate, "make-overlap": cmd_make_overlap,
    "make-short": cmd_make_short,
}


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get("ECAPA2_LOG", "WARNING"), stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    want_help = any(a in ("-h", "--help") for a in argv)
    parser = build_parser(config_help() if want_help else "")
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"ecapa2: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        threads = args.threads if args.threads is not None else int(
            os.environ.get("ECAPA2_THREADS", "1"))
    except ValueError:
        threads = 0
    if threads < 1:
        print("ecapa2: error: thread count must be a positive integer", file=sys.stderr)
        return EXIT_USAGE
    _set_threads(threads)

    from .features import FeatureError
    from .scoring import ScoringError
    from .tensor import NonFiniteError
    from .training import TrainingError
    try:
        cfg = _load_config(args.config)
        out = _out_dir(args)
        import numpy as np
        # overflow surfaces as NonFiniteError from the tensor engine
        with np.errstate(over="ignore", invalid="ignore"):
            summary = COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"ecapa2: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"ecapa2: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FeatureError, ScoringError, TrainingError, OSError, KeyError,
            ValueError) as exc:
        print(f"ecapa2: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
