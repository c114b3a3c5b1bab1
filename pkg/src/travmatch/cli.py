"""travmatch command line: one subcommand per pipeline stage, plus `pipeline`.

Stages hand off through files under ``<workdir>/rep_<r>/``; `pipeline` runs
the same stage functions in order, so its output equals running them one by
one with the same configuration.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import gbm, protocol, siamese, synthlog, tfidf, tokenizer
from .pairfeatures import read_feature_table, write_feature_table
from .simfusion import CandidatePair, read_neighbors

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

log = logging.getLogger("travmatch")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config


@dataclasses.dataclass
class Paths:
    events: Path | None
    truth: Path | None
    workdir: Path
    profiles: Path

    def require(self, *names: str) -> None:
        for name in names:
            p = getattr(self, name)
            if p is None:
                raise UsageError(f"--{name} is required")
            if not Path(p).exists():
                raise UsageError(f"{name} file not found: {p}")


def _csv(conv):
    return lambda raw: tuple(conv(x.strip()) for x in raw.split(",") if x.strip())


def _views(raw: str):
    vals = _csv(str)(raw)
    return protocol.DEFAULT_VIEWS if vals == ("all",) else vals


# flag name -> (config attribute path, converter)
RUN_FLAGS = {
    "seed": ("seed", int),
    "views": ("views", _views),
    "preset": ("preset", str),
    "k": ("k", int),
    "topn": ("topn", _csv(int)),
    "url_max_features": ("url_max_features", protocol._opt_int),
    "embed_fraction": ("embed_fraction", float),
    "block_size": ("block_size", int),
    "threads": ("threads", int),
    "mode": ("split.mode", str),
    "train_fraction": ("split.train_fraction", float),
    "repetitions": ("split.repetitions", int),
    "epochs": ("siamese.epochs", int),
    "batch_size": ("siamese.batch_size", int),
    "margin": ("siamese.margin", float),
    "negative_top_k": ("siamese.negative_top_k", int),
    "output_dim": ("siamese.output_dim", int),
    "num_trees": ("gbm.num_trees", int),
    "max_depth": ("gbm.max_depth", int),
    "gbm_learning_rate": ("gbm.learning_rate", float),
    "min_samples_leaf": ("gbm.min_samples_leaf", int),
}


def _set(cfg, dotted: str, value) -> None:
    target = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        target = getattr(target, p)
    setattr(target, leaf, value)


def resolve(args) -> tuple[protocol.RunConfig, Paths]:
    """Defaults < config file < flags."""
    try:
        cfg = protocol.load_run_config(getattr(args, "config", None))
    except synthlog.ConfigError as exc:
        raise UsageError(str(exc)) from None
    ini = _read_ini(getattr(args, "config", None))
    file_paths = dict(ini["paths"]) if ini.has_section("paths") else {}
    if not ini.has_option("run", "threads"):
        cfg.threads = os.cpu_count() or 1
    for flag, (dotted, conv) in RUN_FLAGS.items():
        raw = getattr(args, flag, None)
        if raw is None:
            continue
        try:
            _set(cfg, dotted, conv(raw) if isinstance(raw, str) else raw)
        except ValueError as exc:
            raise UsageError(f"--{flag.replace('_', '-')}: {exc}") from None
    try:
        cfg.validate()
    except synthlog.ConfigError as exc:
        raise UsageError(str(exc)) from None

    def pick(name):
        val = getattr(args, name, None) or file_paths.get(name)
        return Path(val) if val else None

    workdir = pick("workdir") or Path("travmatch_run")
    profiles = pick("profiles") or workdir / "profiles.jsonl"
    return cfg, Paths(pick("events"), pick("truth"), workdir, profiles)


def _read_ini(path) -> configparser.ConfigParser:
    p = configparser.ConfigParser()
    if path:
        p.read(path, encoding="utf-8")
    return p


def rep_dir(paths: Paths, rep: int) -> Path:
    d = paths.workdir / f"rep_{rep}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def reps_of(args, cfg) -> list[int]:
    if getattr(args, "rep", None) is not None:
        if not 0 <= args.rep < cfg.split.repetitions:
            raise UsageError(f"--rep must lie in [0, {cfg.split.repetitions})")
        return [args.rep]
    return list(range(cfg.split.repetitions))


def _need(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {path}; run `travmatch {produced_by}` first")
    return path


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def git_hash(path: Path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ------------------------------------------------------------------ stage functions


def stage_profiles(paths: Paths) -> list:
    paths.require("events")
    events = synthlog.read_events(paths.events)
    tally = Counter()
    profiles = tokenizer.build_profiles(events, tally)
    paths.profiles.parent.mkdir(parents=True, exist_ok=True)
    tokenizer.write_profiles(paths.profiles, profiles)
    return profiles, tally


def _load_common(paths: Paths):
    paths.require("truth")
    truth = synthlog.read_truth(paths.truth)
    profiles = tokenizer.read_profiles(_need(paths.profiles, "profiles"))
    return truth, profiles


def _load_reps(d: Path, views=None) -> protocol.Representations:
    files = sorted(d.glob("vectors_*.txt"))
    if not files:
        raise UsageError(f"no vectors in {d}; run `travmatch vectorize` first")
    vectors, ids = {}, None
    for f in files:
        view = f.stem[len("vectors_"):]
        if views is not None and view not in views:
            continue
        vid, mat = tfidf.load_vectors(f)
        if ids is not None and vid != ids:
            raise protocol.PipelineError("load", f"{f} rows differ from other views")
        ids = vid
        vectors[view] = mat.tocsr()
    return protocol.Representations(ids, vectors)


def _load_split(d: Path) -> protocol.Split:
    return protocol.Split.from_record(_read_json(_need(d / "split.json", "vectorize")))


def _check_views(reps: protocol.Representations, views) -> None:
    missing = [v for v in views if v not in reps.vectors]
    if missing:
        hint = "train-embed" if "supervised_url" in missing else "vectorize"
        raise UsageError(f"views {missing} have no vectors; run `travmatch {hint}` first")


def stage_vectorize(cfg, paths, rep, truth, profiles) -> None:
    rc = cfg.for_repetition(rep)
    d = rep_dir(paths, rep)
    with protocol.stage("split"):
        split = rc.make_split(profiles, truth)
    _write_json(d / "split.json", split.to_record())
    with protocol.stage("vectorize"):
        reps = protocol.vectorize(profiles, split, rc)
    # a new split invalidates any embedding trained on the previous one
    (d / "vectors_supervised_url.txt").unlink(missing_ok=True)
    for view, model in reps.models.items():
        tfidf.save_model(d / f"tfidf_{view}.txt", model)
        tfidf.save_vectors(d / f"vectors_{view}.txt", reps.ids, reps.vectors[view])


def stage_train_embed(cfg, paths, rep, truth) -> tuple[int, int]:
    rc = cfg.for_repetition(rep)
    d = rep_dir(paths, rep)
    split = _load_split(d)
    reps = _load_reps(d, {"unsupervised_url"})
    trace: list = []
    with protocol.stage("train-embed"):
        params, emb, counts = protocol.train_embedding(reps, split, truth, rc, trace)
    scfg = dataclasses.replace(rc.siamese, input_dim=params.W.shape[1])
    siamese.save_params(d / "siamese.bin", params, scfg)
    siamese.write_loss_trace(d / "siamese_loss.csv", trace)
    tfidf.save_vectors(d / "vectors_supervised_url.txt", reps.ids, emb)
    _write_json(d / "siamese_pairs.json", {"positive": counts[0], "negative": counts[1]})
    return counts


def stage_topn(cfg, paths, rep, truth, views=None) -> dict:
    rc = cfg.for_repetition(rep)
    d = rep_dir(paths, rep)
    split = _load_split(d)
    views = list(views or rc.active_views)
    reps = _load_reps(d)
    _check_views(reps, views)
    with protocol.stage("topn"):
        return protocol.topn_report(reps, split, truth, rc, views)


def stage_fuse(cfg, paths, rep) -> None:
    rc = cfg.for_repetition(rep)
    d = rep_dir(paths, rep)
    split = _load_split(d)
    reps = _load_reps(d)
    _check_views(reps, rc.active_views)
    with protocol.stage("fuse"):
        nbrs_train, nbrs_test = protocol.fused_neighbors(reps, split, rc)
    for name, nbrs in (("train", nbrs_train), ("test", nbrs_test)):
        with open(d / f"neighbors_{name}.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("cookie_id,rank,neighbor_id\n")
            for q in sorted(nbrs):
                for rank, nb in enumerate(nbrs[q], start=1):
                    fh.write(f"{q},{rank},{nb}\n")


def _write_candidates(path: Path, cands) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("u,v,score,label\n")
        for c in cands:
            fh.write(f"{c.u},{c.v},{float(c.score)!r},{'' if c.label is None else c.label}\n")


def _read_candidates(path: Path) -> list[CandidatePair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            u, v, s, lab = line.rstrip("\n").split(",")
            out.append(CandidatePair(u, v, float(s), None if lab == "" else int(lab)))
    return out


def stage_candidates(cfg, paths, rep, truth) -> protocol.CandidateStage:
    rc = cfg.for_repetition(rep)
    d = rep_dir(paths, rep)
    split = _load_split(d)
    reps = _load_reps(d)
    nbrs_train = read_neighbors(_need(d / "neighbors_train.csv", "fuse"))
    nbrs_test = read_neighbors(_need(d / "neighbors_test.csv", "fuse"))
    with protocol.stage("candidates"):
        cs = protocol.select_stage(nbrs_train, nbrs_test, reps, split, truth, rc)
    _write_candidates(d / "candidates_train.csv", cs.train)
    _write_candidates(d / "candidates_test.csv", cs.test)
    _write_json(
        d / "candidates.json",
        {"recall_at": {str(n): r for n, r in cs.recall_at.items()}, "directed_recall": cs.directed_recall},
    )
    return cs


def _load_candidate_stage(d: Path) -> protocol.CandidateStage:
    meta = _read_json(_need(d / "candidates.json", "candidates"))
    return protocol.CandidateStage(
        train=_read_candidates(d / "candidates_train.csv"),
        test=_read_candidates(d / "candidates_test.csv"),
        recall_at={int(n): r for n, r in meta["recall_at"].items()},
        directed_recall=meta["directed_recall"],
    )


def stage_featurize(cfg, paths, rep, profiles) -> tuple[int, int]:
    rc = cfg.for_repetition(rep)
    d = rep_dir(paths, rep)
    split = _load_split(d)
    reps = _load_reps(d)
    cs = _load_candidate_stage(d)
    with protocol.stage("featurize"):
        ctx = protocol.feature_context(profiles, reps, split, rc)
        for name, cands in (("train", cs.train), ("test", cs.test)):
            X = protocol.featurize_stage(ctx, cands)
            write_feature_table(
                d / f"features_{name}.csv", [(c.u, c.v) for c in cands], ctx.columns, X,
                [c.label for c in cands],
            )
    return len(cs.train), len(cs.test)


def stage_train_clf(cfg, paths, rep) -> gbm.GbmModel:
    rc = cfg.for_repetition(rep)
    d = rep_dir(paths, rep)
    pairs, columns, X, labels = read_feature_table(_need(d / "features_train.csv", "featurize"))
    cands = [CandidatePair(u, v, 0.0, lab) for (u, v), lab in zip(pairs, labels)]
    with protocol.stage("train-clf"):
        model = protocol.train_classifier(X, cands, rc, columns)
    gbm.save_model(d / "gbm.json", model)
    return model


def stage_evaluate(cfg, paths, rep, truth) -> protocol.RepetitionResult:
    d = rep_dir(paths, rep)
    split = _load_split(d)
    topn = {k: {int(n): a for n, a in v.items()} for k, v in _read_json(_need(d / "topn.json", "topn")).items()}
    cs = _load_candidate_stage(d)
    model = gbm.load_model(_need(d / "gbm.json", "train-clf"))
    _, _, X_test, _ = read_feature_table(_need(d / "features_test.csv", "featurize"))
    pairs_file = d / "siamese_pairs.json"
    counts = None
    if cfg.uses_siamese and pairs_file.exists():
        rec = _read_json(pairs_file)
        counts = (rec["positive"], rec["negative"])
    with protocol.stage("evaluate"):
        result = protocol.evaluate_stage(rep, cfg, split, truth, topn, cs, model, X_test, counts)
    _write_json(d / "result.json", result.to_record())
    return result


def write_run_report(cfg, paths) -> protocol.MetricsReport | None:
    results = []
    for rep in range(cfg.split.repetitions):
        f = paths.workdir / f"rep_{rep}" / "result.json"
        if not f.exists():
            return None
        results.append(protocol.RepetitionResult.from_record(_read_json(f)))
    report = protocol.MetricsReport(cfg.to_record(), results)
    manifest = {
        "config": cfg.to_record(),
        "threads": cfg.threads,
        "inputs": {
            name: git_hash(p) for name, p in (("events", paths.events), ("truth", paths.truth))
            if p is not None and Path(p).exists()
        },
    }
    protocol.write_report(paths.workdir / "report", report, manifest)
    return report


# ------------------------------------------------------------------ commands


def cmd_generate(args) -> None:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.emails is not None:
        overrides["num_emails"] = args.emails
    try:
        gcfg = synthlog.load_generator_config(args.config, **overrides)
    except synthlog.ConfigError as exc:
        raise UsageError(str(exc)) from None
    events, truth = synthlog.generate_corpus(gcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synthlog.write_events(out / "events.jsonl", events)
    synthlog.write_truth(out / "truth.csv", truth)
    print(f"wrote {len(events)} events, {len(truth.cookies)} cookies, "
          f"{len(truth.emails)} emails to {out}")


def cmd_stats(args) -> None:
    for name in ("events", "truth"):
        if not Path(getattr(args, name)).exists():
            raise UsageError(f"{name} file not found: {getattr(args, name)}")
    st = synthlog.corpus_stats(synthlog.read_events(args.events), synthlog.read_truth(args.truth))
    rec = dataclasses.asdict(st)
    if args.out:
        _write_json(Path(args.out), rec)
    for k, v in rec.items():
        print(f"{k}: {v}")


def cmd_profiles(args) -> None:
    _, paths = resolve(args)
    profiles, tally = stage_profiles(paths)
    print(f"wrote {len(profiles)} profiles to {paths.profiles}"
          + (f" (skipped: {dict(tally)})" if tally else ""))


def cmd_vectorize(args) -> None:
    cfg, paths = resolve(args)
    truth, profiles = _load_common(paths)
    for rep in reps_of(args, cfg):
        stage_vectorize(cfg, paths, rep, truth, profiles)
        print(f"rep {rep}: vectors written to {rep_dir(paths, rep)}")


def cmd_train_embed(args) -> None:
    cfg, paths = resolve(args)
    paths.require("truth")
    truth = synthlog.read_truth(paths.truth)
    for rep in reps_of(args, cfg):
        pos, neg = stage_train_embed(cfg, paths, rep, truth)
        print(f"rep {rep}: siamese trained on {pos} positive / {neg} negative pairs")


def cmd_topn(args) -> None:
    cfg, paths = resolve(args)
    paths.require("truth")
    truth = synthlog.read_truth(paths.truth)
    custom = args.views is not None
    rows = []
    for rep in reps_of(args, cfg):
        views = cfg.views if custom else None
        res = stage_topn(cfg, paths, rep, truth, views)
        if not custom:
            _write_json(rep_dir(paths, rep) / "topn.json",
                        {k: {str(n): a for n, a in v.items()} for k, v in res.items()})
        for label, accs in res.items():
            for n, a in accs.items():
                rows.append((rep, label, n, a))
    out = Path(args.out) if args.out else None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("rep,representation,N,accuracy\n")
            for rep, label, n, a in rows:
                fh.write(f"{rep},{label},{n},{float(a)!r}\n")
    fused = "+".join(cfg.views if custom else cfg.active_views)
    for n in cfg.topn:
        vals = [a for _, label, m, a in rows if label == fused and m == n]
        print(f"{fused} Top{n}: {100 * np.mean(vals):.2f}%")


def cmd_fuse(args) -> None:
    cfg, paths = resolve(args)
    for rep in reps_of(args, cfg):
        stage_fuse(cfg, paths, rep)
        print(f"rep {rep}: fused neighbour lists written")


def cmd_candidates(args) -> None:
    cfg, paths = resolve(args)
    paths.require("truth")
    truth = synthlog.read_truth(paths.truth)
    for rep in reps_of(args, cfg):
        cs = stage_candidates(cfg, paths, rep, truth)
        print(f"rep {rep}: {len(cs.train)} train / {len(cs.test)} test candidates, "
              f"recall@{cfg.k} {100 * cs.recall_at[cfg.k]:.2f}%")


def cmd_featurize(args) -> None:
    cfg, paths = resolve(args)
    profiles = tokenizer.read_profiles(_need(paths.profiles, "profiles"))
    for rep in reps_of(args, cfg):
        n_tr, n_te = stage_featurize(cfg, paths, rep, profiles)
        print(f"rep {rep}: features for {n_tr} train / {n_te} test pairs")


def cmd_train_clf(args) -> None:
    cfg, paths = resolve(args)
    for rep in reps_of(args, cfg):
        model = stage_train_clf(cfg, paths, rep)
        print(f"rep {rep}: {len(model.trees)} trees, threshold {model.threshold:.4f}")


def cmd_evaluate(args) -> None:
    cfg, paths = resolve(args)
    paths.require("truth")
    truth = synthlog.read_truth(paths.truth)
    for rep in reps_of(args, cfg):
        r = stage_evaluate(cfg, paths, rep, truth)
        print(f"rep {rep}: P {100 * r.precision:.2f}% R {100 * r.recall:.2f}% "
              f"F1 {100 * r.f1:.2f}% AUCPR {100 * r.aucpr:.2f}%")
    report = write_run_report(cfg, paths)
    if report is not None:
        print(protocol.format_summary(report), end="")


def cmd_pipeline(args) -> None:
    cfg, paths = resolve(args)
    paths.require("events", "truth")
    truth = synthlog.read_truth(paths.truth)
    profiles, _ = stage_profiles(paths)
    for rep in reps_of(args, cfg):
        log.info("repetition %d/%d", rep + 1, cfg.split.repetitions)
        stage_vectorize(cfg, paths, rep, truth, profiles)
        if cfg.uses_siamese:
            stage_train_embed(cfg, paths, rep, truth)
        res = stage_topn(cfg, paths, rep, truth)
        _write_json(rep_dir(paths, rep) / "topn.json",
                    {k: {str(n): a for n, a in v.items()} for k, v in res.items()})
        stage_fuse(cfg, paths, rep)
        stage_candidates(cfg, paths, rep, truth)
        stage_featurize(cfg, paths, rep, profiles)
        stage_train_clf(cfg, paths, rep)
        stage_evaluate(cfg, paths, rep, truth)
    report = write_run_report(cfg, paths)
    if report is not None:
        print(protocol.format_summary(report), end="")
        print(f"report written to {paths.workdir / 'report'}")


# ------------------------------------------------------------------ parser


def _run_options(p: argparse.ArgumentParser, *, data=True, rep=True) -> None:
    p.add_argument("--config", help="INI run configuration")
    if data:
        p.add_argument("--events", help="events file (JSON lines)")
        p.add_argument("--truth", help="ground-truth file (email_id,cookie_id)")
        p.add_argument("--profiles", help="profiles file (default <workdir>/profiles.jsonl)")
    p.add_argument("--workdir", help="stage artifact directory (default travmatch_run)")
    if rep:
        p.add_argument("--rep", type=int, help="run a single repetition")
    g = p.add_argument_group("run options (override the config file)")
    for flag in RUN_FLAGS:
        g.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="travmatch", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic event log and ground truth")
    p.add_argument("--config", help="INI generator configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--emails", type=int)
    p.add_argument("--out", default="data", help="output directory (default data)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--events", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", help="also write the statistics as JSON")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("profiles", help="group events into per-cookie profiles")
    _run_options(p, rep=False)
    p.set_defaults(func=cmd_profiles)

    for name, func, help_ in (
        ("vectorize", cmd_vectorize, "split cookies and fit TF-IDF views on the training side"),
        ("train-embed", cmd_train_embed, "train the Siamese URL embedding"),
        ("fuse", cmd_fuse, "fused top-k neighbour lists"),
        ("candidates", cmd_candidates, "select candidate pairs from the neighbour lists"),
        ("featurize", cmd_featurize, "pairwise feature tables"),
        ("train-clf", cmd_train_clf, "fit the GBM classifier and its threshold"),
        ("evaluate", cmd_evaluate, "score test candidates and write the report"),
        ("pipeline", cmd_pipeline, "run every stage end to end"),
    ):
        p = sub.add_parser(name, help=help_)
        _run_options(p)
        p.set_defaults(func=func)

    p = sub.add_parser("topn", help="TopN accuracy of single and fused views")
    _run_options(p)
    p.add_argument("--out", help="CSV of per-repetition accuracies")
    p.set_defaults(func=cmd_topn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except UsageError as exc:
        print(f"travmatch {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except protocol.PipelineError as exc:
        print(f"travmatch {args.command}: failed {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"travmatch {args.command}: failed [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
