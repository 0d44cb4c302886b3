"""``echolab`` command line: synth, ingest, split, stats, train, predict, eval, describe.

Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

from . import corpus as corpus_mod
from . import evaluation as ev
from . import modelio
from .corpus import SpanAnnotation
from .doc_model import (BowConfig, BowDocModel, CnnConfig, CnnDocModel, spans_to_doc_label,
                        train_bow, train_cnn)
from .errors import EchoLabError, ValidationError
from .ontology import SeverityLabel, default_ontology, load_ontology
from .rule_engine import classify_range as rule_classify
from .rule_engine import compile_rules, match_document
from .span_model import (SWEEP_WEIGHTS, SpanModel, SpanModelConfig, predict_corpus,
                         prepare_docs, train_sweep)
from .synth import generate_synthetic
from .textproc import tokenize

log = logging.getLogger("echolab")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
SPAN_PREFIX, CNN_PREFIX, MODEL_SUFFIX = "span_", "cnn_", ".ecl"


def worker_count(n_jobs: int) -> int:
    """Workers for per-characteristic jobs, capped by ``ECHOLAB_THREADS``."""
    raw = os.environ.get("ECHOLAB_THREADS", "")
    try:
        cap = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise ValidationError(f"ECHOLAB_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


def run_jobs(fn, jobs):
    """Map ``fn`` over ``jobs`` in a process pool (or inline for one worker)."""
    n = worker_count(len(jobs))
    if n == 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# ---------------------------------------------------------------- loading helpers

def _ontology(args):
    return load_ontology(args.ontology) if args.ontology else default_ontology()


def _require_file(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")


def _load_corpus(args, ontology, part=None):
    _require_file(args.corpus, "corpus")
    docs = corpus_mod.read_jsonl(args.corpus, ontology)
    split_path = getattr(args, "split", None)
    part = part or getattr(args, "part", None)
    if split_path and part:
        _require_file(split_path, "split manifest")
        sp = corpus_mod.CorpusSplit.from_json(json.loads(Path(split_path).read_text("utf-8")))
        train, test = sp.partition(docs)
        return train if part == "train" else test
    return docs


def _check_version(header_version, ontology, path):
    if int(header_version) != ontology.version:
        raise ValidationError(f"{path}: model built for ontology version {header_version}, "
                              f"corpus ontology is version {ontology.version}")


def load_span_models(path, ontology) -> dict:
    path = Path(path)
    files = sorted(path.glob(f"{SPAN_PREFIX}*{MODEL_SUFFIX}")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no span models in {path}")
    models = {}
    for f in files:
        m = SpanModel.load(f)
        _check_version(m.ontology_version, ontology, f)
        models[m.characteristic_id] = m
    return models


def load_rules(path, ontology):
    _require_file(path, "rule file")
    header_line = Path(path).read_text(encoding="utf-8").splitlines()[:1]
    if header_line and header_line[0].startswith("# ontology_version="):
        _check_version(header_line[0].split("=", 1)[1], ontology, path)
    return compile_rules(Path(path), ontology)


def load_doc_model(kind, path, ontology):
    path = Path(path)
    if kind == "bow":
        m = BowDocModel.load(path)
        _check_version(m.ontology_version, ontology, path)
        return m
    files = sorted(path.glob(f"{CNN_PREFIX}*{MODEL_SUFFIX}")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no CNN models in {path}")
    models = {}
    for f in files:
        m = CnnDocModel.load(f)
        _check_version(m.ontology_version, ontology, f)
        models[m.characteristic_id] = m
    return models


def span_predictions(kind, model_path, docs, ontology, threshold):
    """{doc_id: [SpanAnnotation]} from rules or span models."""
    if kind == "rules":
        rules = load_rules(model_path, ontology)
        return {d.doc_id: match_document(tokenize(d.text, d.doc_id), rules) for d in docs}
    if kind != "span":
        raise ValidationError(f"{kind!r} models do not predict spans")
    models = load_span_models(model_path, ontology)
    preds = predict_corpus(docs, models, threshold)
    return {d.doc_id: p for d, p in zip(docs, preds)}


def doc_predictions(kind, model_path, docs, ontology, threshold):
    """{doc_id: {char_id: label}} from any model kind."""
    if kind in ("rules", "span"):
        spans = span_predictions(kind, model_path, docs, ontology, threshold)
        return {doc_id: spans_to_doc_labels(sp, ontology) for doc_id, sp in spans.items()}
    model = load_doc_model(kind, model_path, ontology)
    if kind == "bow":
        labels = model.predict(docs)
    else:
        labels = [dict() for _ in docs]
        for cid, m in sorted(model.items()):
            for r, lab in enumerate(m.predict(docs)):
                labels[r][cid] = lab
    return {d.doc_id: lab for d, lab in zip(docs, labels)}


def spans_to_doc_labels(spans, ontology) -> dict:
    return {ch.id: spans_to_doc_label([s for s in spans if s.characteristic_id == ch.id])
            for ch in ontology}


# ---------------------------------------------------------------- prediction files

def write_predictions(path, spans=None, labels=None):
    lines = []
    for doc_id in sorted(spans if spans is not None else labels):
        rec = {"doc_id": doc_id}
        if spans is not None:
            rec["spans"] = [s.to_json() for s in spans[doc_id]]
        else:
            rec["labels"] = {k: v.value for k, v in sorted(labels[doc_id].items())}
        lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
    modelio.atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_predictions(path):
    """Returns ("spans", {doc_id: [...]}) or ("labels", {doc_id: {...}})."""
    _require_file(path, "predictions")
    spans, labels = {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc_id = rec["doc_id"]
                if "spans" in rec:
                    spans[doc_id] = [SpanAnnotation(int(s["start"]), int(s["end"]),
                                                    s["characteristic"],
                                                    SeverityLabel.parse(s["label"]))
                                     for s in rec["spans"]]
                else:
                    labels[doc_id] = {k: SeverityLabel.parse(v)
                                      for k, v in rec["labels"].items()}
            except (KeyError, TypeError, json.JSONDecodeError) as err:
                raise ValidationError(f"{path}:{lineno}: bad prediction record ({err})") from None
    if spans and labels:
        raise ValidationError(f"{path}: mixes span and label predictions")
    return ("spans", spans) if spans or not labels else ("labels", labels)


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    ontology = _ontology(args)
    docs = generate_synthetic(ontology, args.n, args.seed, profile=args.profile)
    corpus_mod.write_jsonl(docs, args.out)
    print(f"wrote {len(docs)} reports to {args.out}")


def cmd_ingest(args):
    ontology = _ontology(args)
    for p in args.inputs:
        _require_file(p, "input")
    docs = corpus_mod.ingest_files(args.inputs, ontology)
    n_in = len(docs)
    if args.filter:
        rules = load_rules(args.rules, ontology) if args.rules else compile_rules(None, ontology)
        docs = corpus_mod.filter_reports(docs, rules)
    corpus_mod.write_jsonl(docs, args.out)
    print(f"ingested {n_in} reports, kept {len(docs)}, wrote {args.out}")


def cmd_split(args):
    ontology = _ontology(args)
    docs = _load_corpus(args, ontology)
    sp = corpus_mod.split(docs, args.ratio, args.seed)
    modelio.atomic_write_text(args.out, json.dumps(sp.to_json(), indent=1) + "\n")
    print(f"train {len(sp.train)} / test {len(sp.test)} -> {args.out}")


def cmd_stats(args):
    ontology = _ontology(args)
    docs = _load_corpus(args, ontology)
    dist = corpus_mod.distribution_csv(corpus_mod.label_distribution(docs, ontology))
    stats = corpus_mod.stats_csv(corpus_mod.span_stats(docs, ontology))
    if args.out:
        modelio.atomic_write_text(f"{args.out}_labels.csv", dist)
        modelio.atomic_write_text(f"{args.out}_spans.csv", stats)
    sys.stdout.write(dist + "\n" + stats)


def _train_span_job(corpus_path, split_path, ontology_path, cid, cfg_json, weights, threshold,
                    out):
    # runs in a worker process, so everything arrives as plain values
    ontology = load_ontology(ontology_path) if ontology_path else default_ontology()
    ns = argparse.Namespace(corpus=corpus_path, split=split_path, part="train")
    docs = _load_corpus(ns, ontology)
    cfg = SpanModelConfig.from_json(cfg_json)
    model = train_sweep(prepare_docs(docs, cfg), cid, cfg, ontology, weights, threshold)
    model.save(out)
    return cid, model.sweep_log


def _train_cnn_job(corpus_path, split_path, ontology_path, cid, cfg_json, scheme, out):
    ontology = load_ontology(ontology_path) if ontology_path else default_ontology()
    ns = argparse.Namespace(corpus=corpus_path, split=split_path, part="train")
    docs = corpus_mod.apply_scheme(_load_corpus(ns, ontology), scheme)
    model = train_cnn(docs, cid, CnnConfig.from_json(cfg_json), ontology, scheme=scheme)
    model.save(out)
    return cid, model.training_log[-1]


def _char_ids(args, ontology):
    if not args.characteristics:
        return ontology.ids
    ids = [c.strip() for c in args.characteristics.split(",") if c.strip()]
    for cid in ids:
        ontology[cid]
    return ids


def cmd_train(args):
    ontology = _ontology(args)
    if args.kind == "rule-compile":
        if args.rules:
            _require_file(args.rules, "rule file")
            text = Path(args.rules).read_text(encoding="utf-8")
        else:
            text = resources.files("echolab.data").joinpath("rules.tsv").read_text("utf-8")
        rules = compile_rules(text, ontology)
        body = [ln for ln in text.splitlines() if not ln.startswith("# ontology_version=")]
        modelio.atomic_write_text(args.out, f"# ontology_version={ontology.version}\n"
                                  + "\n".join(body) + "\n")
        counts = ", ".join(f"{k}={v}" for k, v in rules.counts().items())
        print(f"compiled {len(rules)} rules ({counts}) -> {args.out}")
        return
    if not args.corpus:
        raise ValidationError(f"train {args.kind} needs --corpus")
    if args.split:
        _require_file(args.split, "split manifest")
    _require_file(args.corpus, "corpus")
    if args.seed is None:
        raise ValidationError(f"train {args.kind} needs an explicit --seed")
    out = Path(args.out)
    cids = _char_ids(args, ontology)
    if args.kind == "span":
        base = SpanModelConfig.desk() if args.schedule == "desk" else SpanModelConfig()
        over = {"seed": args.seed}
        for name in ("max_steps", "batch_size", "patience", "eval_frequency"):
            if getattr(args, name) is not None:
                over[name] = getattr(args, name)
        cfg = SpanModelConfig.from_json({**base.to_json(), **over})
        weights = tuple(args.weights) if args.weights else SWEEP_WEIGHTS
        out.mkdir(parents=True, exist_ok=True)
        jobs = [(args.corpus, args.split, args.ontology, cid, cfg.to_json(), weights,
                 args.threshold, str(out / f"{SPAN_PREFIX}{cid}{MODEL_SUFFIX}")) for cid in cids]
        sweep = dict(run_jobs(_train_span_job, jobs))
        modelio.atomic_write_text(out / "sweep_log.json",
                                  json.dumps(sweep, indent=1, sort_keys=True) + "\n")
        for cid in cids:
            print(f"{cid}: selected negative weight {sweep[cid][-1]['selected']}")
    elif args.kind == "bow":
        docs = corpus_mod.apply_scheme(_load_corpus(args, ontology, "train"), args.scheme)
        cfg = BowConfig(seed=args.seed)
        if args.n_estimators:
            cfg.n_estimators = args.n_estimators
        model = train_bow(docs, ontology, cfg, char_ids=set(cids), scheme=args.scheme)
        model.save(out)
        print(f"trained BOW model for {len(model.heads)} characteristics -> {out}")
    elif args.kind == "cnn":
        cfg = CnnConfig(seed=args.seed)
        if args.epochs:
            cfg.epochs = args.epochs
        out.mkdir(parents=True, exist_ok=True)
        jobs = [(args.corpus, args.split, args.ontology, cid, cfg.to_json(), args.scheme,
                 str(out / f"{CNN_PREFIX}{cid}{MODEL_SUFFIX}")) for cid in cids]
        for cid, last in run_jobs(_train_cnn_job, jobs):
            print(f"{cid}: final epoch loss {last['loss']:.4f}")


def cmd_predict(args):
    ontology = _ontology(args)
    docs = _load_corpus(args, ontology)
    if args.kind in ("rules", "span") and not args.doc_labels:
        spans = span_predictions(args.kind, args.model, docs, ontology, args.threshold)
        write_predictions(args.out, spans=spans)
    else:
        labels = doc_predictions(args.kind, args.model, docs, ontology, args.threshold)
        write_predictions(args.out, labels=labels)
    print(f"predicted {len(docs)} reports -> {args.out}")


def _range_classifier(kind, model_path, ontology):
    if kind == "rules":
        rules = load_rules(model_path, ontology)
        return lambda td, cid, i, j: rule_classify(td, rules, cid, i, j)
    models = load_span_models(model_path, ontology)

    def classify(td, cid, i, j):
        m = models.get(cid)
        if m is None:
            return SeverityLabel.NO_LABEL
        return m.classes[int(m.classify_range(td, i, j).argmax())]
    return classify


def cmd_eval(args):
    ontology = _ontology(args)
    docs = _load_corpus(args, ontology)
    if not args.predictions and not args.model:
        raise ValidationError("eval needs --predictions or --kind/--model")
    if args.model and not args.kind:
        raise ValidationError("--model needs --kind")
    title = args.title or f"{args.mode} ({args.scheme} scheme)"
    if args.mode in ("span-e2e", "span-matched") and args.scheme != "full":
        raise ValidationError("span evaluation only supports the full label scheme")
    if args.mode == "span-e2e":
        if args.predictions:
            what, preds = read_predictions(args.predictions)
            if what != "spans":
                raise ValidationError("span-e2e needs span predictions")
        else:
            preds = span_predictions(args.kind, args.model, docs, ontology, args.threshold)
        rep = ev.evaluate_spans(docs, preds, ontology, title)
    elif args.mode == "span-matched":
        if args.kind not in ("rules", "span") or not args.model:
            raise ValidationError("span-matched needs --kind rules|span and --model")
        tables = ev.span_eval(docs, None, ontology, "matched",
                              classifier=_range_classifier(args.kind, args.model, ontology))
        rep = ev.build_report(tables, title, exclude=(SeverityLabel.NO_LABEL,))
    else:
        if args.predictions:
            what, preds = read_predictions(args.predictions)
            if what == "spans":
                labels = {d: spans_to_doc_labels(sp, ontology) for d, sp in preds.items()}
            elif args.mode == "doc-via-spans":
                raise ValidationError("doc-via-spans needs span predictions")
            else:
                labels = preds
        else:
            if args.mode == "doc-via-spans" and args.kind not in ("rules", "span"):
                raise ValidationError("doc-via-spans needs --kind rules|span")
            labels = doc_predictions(args.kind, args.model, docs, ontology, args.threshold)
        for d in docs:
            labels.setdefault(d.doc_id, {})
        gold = {d.doc_id: d.doc_labels for d in docs}
        rep = ev.build_report(ev.doc_eval(gold, labels, ontology, args.scheme), title)
    md = ev.render_report(rep, "markdown")
    if args.out:
        modelio.atomic_write_text(f"{args.out}.csv", ev.render_report(rep, "csv"))
        modelio.atomic_write_text(f"{args.out}.md", md)
    sys.stdout.write(md)


def cmd_describe(args):
    _require_file(args.model, "model")
    print(modelio.describe(args.model))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="echolab",
                                description="Echocardiogram report label extraction.")
    p.add_argument("--ontology", help="ontology INI file (default: bundled)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic annotated corpus")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--profile", help="label-distribution profile JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="validate and merge annotation JSONL exports")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--filter", action="store_true", help="drop too-short reports")
    s.add_argument("--rules", help="rule file used by --filter")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", help="seeded train/test split manifest")
    s.add_argument("--corpus", required=True)
    s.add_argument("--ratio", type=float, default=0.8)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("stats", help="label distribution and span statistics")
    s.add_argument("--corpus", required=True)
    s.add_argument("--split")
    s.add_argument("--part", choices=("train", "test"))
    s.add_argument("--out", help="prefix for CSV files")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train", help="train models")
    s.add_argument("kind", choices=("rule-compile", "span", "bow", "cnn"))
    s.add_argument("--corpus")
    s.add_argument("--split", help="split manifest; trains on its train part")
    s.add_argument("--out", required=True, help="output file (rules, bow) or directory")
    s.add_argument("--seed", type=int)
    s.add_argument("--rules", help="rule source for rule-compile (default: bundled)")
    s.add_argument("--characteristics", help="comma-separated subset")
    s.add_argument("--scheme", choices=("full", "simplified"), default="full")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--schedule", choices=("desk", "full"), default="desk",
                   help="span training schedule preset")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--eval-frequency", type=int)
    s.add_argument("--weights", type=float, nargs="+", help="negative-weight sweep")
    s.add_argument("--epochs", type=int, help="CNN epochs")
    s.add_argument("--n-estimators", type=int, help="boosting rounds")
    s.set_defaults(func=cmd_train, part="train")

    s = sub.add_parser("predict", help="write span or document predictions")
    s.add_argument("--kind", choices=("rules", "span", "bow", "cnn"), required=True)
    s.add_argument("--model", required=True, help="rule file, model file or directory")
    s.add_argument("--corpus", required=True)
    s.add_argument("--split")
    s.add_argument("--part", choices=("train", "test"))
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--doc-labels", action="store_true",
                   help="aggregate span predictions into document labels")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="evaluation reports (CSV + markdown)")
    s.add_argument("mode", choices=("span-e2e", "span-matched", "doc", "doc-via-spans"))
    s.add_argument("--corpus", required=True, help="gold corpus")
    s.add_argument("--split")
    s.add_argument("--part", choices=("train", "test"), default="test")
    s.add_argument("--predictions")
    s.add_argument("--kind", choices=("rules", "span", "bow", "cnn"))
    s.add_argument("--model")
    s.add_argument("--scheme", choices=("full", "simplified"), default="full")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--title")
    s.add_argument("--out", help="prefix for .csv and .md reports")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("describe", help="print a model file header")
    s.add_argument("model")
    s.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as err:
        print(f"echolab: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"echolab: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (EchoLabError, ValueError) as err:
        print(f"echolab: {err}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
