"""Command-line front end: ``shmm-aud <command> ...``.

Exit status is 0 on success, 1 on usage errors and 2 on data errors
(unreadable or malformed inputs, training failures).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import metrics
from .feats import (FeatureFormatError, FeatureMatrix, MfccConfig, Waveform, extract,
                    read_features, write_features)
from .train import (SUBMITTED_TRUNCATIONS, ModelFormatError, TrainConfig, TrainingError,
                    Utterance, decode, discover_units, load_model, save_model,
                    train_subspace)

log = logging.getLogger("shmm_aud")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class ManifestRecord:
    utt_id: str
    feats: Path
    duration_sec: float
    transcript: list | None = None
    language: str | None = None


def parse_manifest(path):
    """Records of a JSON-lines manifest, in file order.

    Relative feature paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    records, seen = [], {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: malformed JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise DataError(f"{where}: expected a JSON object")
        for key in ("id", "feats", "duration_sec"):
            if key not in obj:
                raise DataError(f"{where}: missing required field '{key}'")
        utt_id = str(obj["id"])
        if utt_id in seen:
            raise DataError(f"{path}: duplicate id {utt_id!r} on lines "
                            f"{seen[utt_id]} and {lineno}")
        seen[utt_id] = lineno
        try:
            duration = float(obj["duration_sec"])
        except (TypeError, ValueError) as exc:
            raise DataError(f"{where}: duration_sec is not a number") from exc
        if not duration > 0:
            raise DataError(f"{where}: duration_sec must be positive")
        transcript = obj.get("transcript")
        if transcript is not None:
            if isinstance(transcript, str):
                transcript = transcript.split()
            transcript = [str(t) for t in transcript]
        feats = Path(obj["feats"])
        if not feats.is_absolute():
            feats = path.parent / feats
        records.append(ManifestRecord(utt_id, feats, duration, transcript,
                                      obj.get("language")))
    return records


def load_utterances(records, language=None):
    utts = []
    for r in records:
        try:
            fm = read_features(r.feats)
        except OSError as exc:
            raise DataError(f"cannot read features for {r.utt_id}: {exc}") from exc
        utts.append(Utterance(r.utt_id, fm.data, r.transcript, r.duration_sec,
                              r.language or language))
    return utts


def _read_json(path, what):
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise DataError(f"{path}: {what} must be a JSON object")
    return obj


def _train_config(args, base=None, **overrides):
    """Config from --config (or ``base`` when absent) plus explicit flags."""
    try:
        if args.config:
            cfg = TrainConfig.from_dict(_read_json(args.config, "config"))
        else:
            cfg = base or TrainConfig()
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid config: {exc}") from exc
    kw = {k: v for k, v in overrides.items() if v is not None}
    if args.seed is not None:
        kw["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        kw["jobs"] = args.jobs
    return cfg.replace(**kw) if kw else cfg


def _write_lines(path, objs):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# Commands


def read_wav(path):
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / np.iinfo(data.dtype).max
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return Waveform(data, int(sr))


def cmd_feats_extract(args):
    d = _read_json(args.config, "config") if args.config else {}
    try:
        cfg = MfccConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid feature config: {exc}") from exc
    src = Path(args.wav)
    wavs = sorted(src.glob("*.wav")) if src.is_dir() else [src]
    if not wavs:
        raise DataError(f"no .wav files under {src}")
    transcripts = {}
    if args.transcripts:
        for rec in _read_jsonl(args.transcripts):
            transcripts[str(rec["id"])] = rec.get("transcript")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for wav in wavs:
        wave = read_wav(wav)
        try:
            fm = extract(wave, cfg)
        except ValueError as exc:
            raise DataError(f"{wav}: {exc}") from exc
        write_features(out / f"{wav.stem}.feats", fm)
        rec = {"id": wav.stem, "feats": f"{wav.stem}.feats",
               "duration_sec": wave.duration_sec}
        if wav.stem in transcripts:
            rec["transcript"] = transcripts[wav.stem]
        lines.append(rec)
    _write_lines(out / "manifest.jsonl", lines)
    print(json.dumps({"utterances": len(lines), "manifest": str(out / "manifest.jsonl")}))


def _read_jsonl(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
    return out


def cmd_train_subspace(args):
    cfg = _train_config(args, epochs=args.epochs)
    corpora = {}
    for m in args.manifest:
        records = parse_manifest(m)
        for utt in load_utterances(records, language=Path(m).stem):
            if not utt.transcript:
                raise DataError(f"{m}: utterance {utt.utt_id} has no transcript")
            corpora.setdefault(utt.language, []).append(utt)
    model = train_subspace(corpora, cfg)
    save_model(model, args.out)
    print(json.dumps({"phase": model.phase, "units": len(model.labels),
                      "elbo": model.epoch_log[-1] if model.epoch_log else None}))


def cmd_discover(args):
    base = load_model(args.model)
    cfg = _train_config(args, base.config, truncation=args.truncation,
                        concentration=args.concentration, epochs=args.epochs)
    utts = load_utterances(parse_manifest(args.manifest))
    model = discover_units(utts, base, cfg)
    save_model(model, args.out)
    print(json.dumps({"phase": model.phase, "truncation": len(model.labels),
                      "elbo": model.epoch_log[-1] if model.epoch_log else None}))


def cmd_decode(args):
    model = load_model(args.model)
    utts = load_utterances(parse_manifest(args.manifest))
    want_post = args.posteriors_dir is not None
    results = decode(model, utts, args.acoustic_scale, args.jobs or 1, want_post)
    if want_post:
        post_dir = Path(args.posteriors_dir)
        post_dir.mkdir(parents=True, exist_ok=True)
        for tr, post in results:
            write_features(post_dir / f"{tr.utt_id}.feats", FeatureMatrix(post))
        results = [tr for tr, _ in results]
    _write_lines(args.out, [tr.to_dict() for tr in results])
    print(json.dumps({"utterances": len(results), "out": str(args.out)}))


def read_decoded(path):
    seqs = []
    for k, rec in enumerate(_read_jsonl(path), 1):
        try:
            seqs.append(metrics.SymbolSequence(
                str(rec["id"]), [u["label"] for u in rec["units"]],
                float(rec["duration_sec"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: record {k} is not a decode output line") from exc
    return seqs


def cmd_eval_bitrate(args):
    seqs = read_decoded(args.decoded)
    n = sum(len(s.symbols) for s in seqs)
    print(json.dumps({"bitrate": metrics.bitrate(seqs), "symbols": n,
                      "distinct": len({x for s in seqs for x in s.symbols}),
                      "duration_sec": sum(s.duration_sec for s in seqs)}))


def read_abx_items(path, backend):
    base = Path(path).parent
    items = []
    for k, rec in enumerate(_read_jsonl(path), 1):
        try:
            if backend == "dtwkl":
                p = Path(rec["posteriors"])
                payload = read_features(p if p.is_absolute() else base / p).data
            else:
                payload = rec["symbols"]
                payload = payload.split() if isinstance(payload, str) else list(payload)
            items.append(metrics.AbxItem(str(rec["id"]), str(rec["category"]), payload))
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: item {k} lacks field {exc}") from exc
        except OSError as exc:
            raise DataError(f"{path}: item {k}: {exc}") from exc
    return items


def cmd_eval_abx(args):
    items = read_abx_items(args.items, args.backend)
    err = metrics.abx_error(items, args.backend)
    print(json.dumps({"abx_error": err, "backend": args.backend, "items": len(items)}))


def cmd_eval_cer(args):
    try:
        hyp = Path(args.hyp).read_text(encoding="utf-8").splitlines()
        ref = Path(args.ref).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(str(exc)) from exc
    if len(hyp) != len(ref):
        raise DataError(f"hypothesis has {len(hyp)} lines, reference {len(ref)}")
    edits = sum(metrics.levenshtein(h, r) for h, r in zip(hyp, ref))
    chars = sum(len(r) for r in ref)
    if chars == 0:
        raise DataError("empty reference")
    print(json.dumps({"cer": edits / chars, "edits": edits, "ref_chars": chars,
                      "lines": len(ref)}))


def cmd_inspect(args):
    if args.defaults:
        print(json.dumps({"train": TrainConfig().to_dict(),
                          "features": MfccConfig().to_dict(),
                          "submitted_truncations": list(SUBMITTED_TRUNCATIONS)},
                         indent=2, sort_keys=True))
        return
    model = load_model(args.model)
    print(json.dumps({"phase": model.phase, "labels": model.labels,
                      "layout": model.layout.to_dict(),
                      "subspace_dim": model.subspace.P,
                      "config": model.config.to_dict(),
                      "epochs": len(model.epoch_log),
                      "final_elbo": model.epoch_log[-1] if model.epoch_log else None},
                     indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    p = _Parser(prog="shmm-aud", description="Acoustic unit discovery with "
                "subspace HMMs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True, jobs=True):
        if seed:
            sp.add_argument("--seed", type=int, help="random seed")
        if jobs:
            sp.add_argument("--jobs", type=int, help="per-utterance parallelism")

    feats = sub.add_parser("feats", help="feature extraction")
    fsub = feats.add_subparsers(dest="feats_command", required=True, parser_class=_Parser)
    fe = fsub.add_parser("extract", help="MFCC + deltas from WAV files")
    fe.add_argument("--wav", required=True, help="WAV file or directory of WAVs")
    fe.add_argument("--config", help="JSON feature config")
    fe.add_argument("--transcripts", help="JSON lines {id, transcript} to copy "
                    "into the manifest")
    fe.add_argument("--out", required=True, help="output directory")
    fe.set_defaults(func=cmd_feats_extract)

    ts = sub.add_parser("train-subspace", help="phase 1 on transcribed languages")
    ts.add_argument("--manifest", required=True, action="append",
                    help="manifest with transcripts; repeat once per language")
    ts.add_argument("--config", help="JSON training config")
    ts.add_argument("--epochs", type=int)
    ts.add_argument("--out", required=True, help="output model file")
    common(ts)
    ts.set_defaults(func=cmd_train_subspace)

    dc = sub.add_parser("discover", help="phase 2 unit discovery")
    dc.add_argument("--model", required=True, help="phase-1 model")
    dc.add_argument("--manifest", required=True)
    dc.add_argument("--truncation", type=int)
    dc.add_argument("--concentration", type=float)
    dc.add_argument("--epochs", type=int)
    dc.add_argument("--config", help="JSON training config")
    dc.add_argument("--out", required=True, help="output model file")
    common(dc)
    dc.set_defaults(func=cmd_discover)

    de = sub.add_parser("decode", help="Viterbi unit transcripts")
    de.add_argument("--model", required=True, help="discovered-unit model")
    de.add_argument("--manifest", required=True)
    de.add_argument("--out", required=True, help="output JSON lines")
    de.add_argument("--acoustic-scale", type=float, default=1.0)
    de.add_argument("--posteriors-dir", help="write unit posteriorgrams here")
    common(de, seed=False)
    de.set_defaults(func=cmd_decode)

    ev = sub.add_parser("eval", help="metrics")
    esub = ev.add_subparsers(dest="eval_command", required=True, parser_class=_Parser)
    eb = esub.add_parser("bitrate")
    eb.add_argument("--decoded", required=True)
    eb.set_defaults(func=cmd_eval_bitrate)
    ea = esub.add_parser("abx")
    ea.add_argument("--items", required=True)
    ea.add_argument("--backend", choices=sorted(metrics.BACKENDS), default="levenshtein")
    ea.set_defaults(func=cmd_eval_abx)
    ec = esub.add_parser("cer")
    ec.add_argument("--hyp", required=True)
    ec.add_argument("--ref", required=True)
    ec.set_defaults(func=cmd_eval_cer)

    ins = sub.add_parser("inspect", help="print defaults or a model summary")
    g = ins.add_mutually_exclusive_group(required=True)
    g.add_argument("--defaults", action="store_true")
    g.add_argument("--model")
    ins.set_defaults(func=cmd_inspect)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    if getattr(args, "jobs", None) is not None and args.jobs < 1:
        print("shmm-aud: error: --jobs must be at least 1", file=sys.stderr)
        return 1
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args.func(args)
    except (DataError, FeatureFormatError, ModelFormatError, TrainingError,
            KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"shmm-aud: {msg}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())
