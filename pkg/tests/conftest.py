import pytest

from travmatch.synthlog import GeneratorConfig, generate_corpus
from travmatch.tokenizer import build_profiles


@pytest.fixture(scope="session")
def small_corpus():
    events, truth = generate_corpus(GeneratorConfig(seed=7, num_emails=150))
    return events, truth, build_profiles(events)


@pytest.fixture(scope="session")
def default_corpus():
    """The seed-42, 2,000-email corpus used by the acceptance checks."""
    events, truth = generate_corpus(GeneratorConfig(seed=42, num_emails=2000))
    return events, truth, build_profiles(events)


@pytest.fixture(scope="session")
def default_stages(default_corpus):
    """Repetition 0 of the default run, carried up to the feature context."""
    from travmatch import protocol

    _, truth, profiles = default_corpus
    cfg = protocol.RunConfig().for_repetition(0)
    split = cfg.make_split(profiles, truth)
    reps = protocol.vectorize(profiles, split, cfg)
    _, emb, counts = protocol.train_embedding(reps, split, truth, cfg)
    reps.vectors["supervised_url"] = emb
    nbrs_train, nbrs_test = protocol.fused_neighbors(reps, split, cfg)
    cands = protocol.select_stage(nbrs_train, nbrs_test, reps, split, truth, cfg)
    ctx = protocol.feature_context(profiles, reps, split, cfg)
    return dict(config=cfg, split=split, reps=reps, cands=cands, ctx=ctx, pair_counts=counts)


def _run_cli(*argv):
    from travmatch.cli import main

    code = main([str(a) for a in argv])
    assert code == 0, f"travmatch {' '.join(map(str, argv))} exited {code}"


@pytest.fixture(scope="session")
def default_cli_run(tmp_path_factory):
    """The default configuration end to end through the command line:
    generate (seed 42, 2,000 emails) then pipeline, timed together."""
    import time

    root = tmp_path_factory.mktemp("default_run")
    t0 = time.perf_counter()
    _run_cli("generate", "--seed", 42, "--emails", 2000, "--out", root / "data")
    _run_cli("pipeline", "--events", root / "data/events.jsonl", "--truth", root / "data/truth.csv",
             "--workdir", root / "work")
    seconds = time.perf_counter() - t0
    return dict(root=root, data=root / "data", workdir=root / "work", seconds=seconds)


# acceptance criterion number -> (passed, title, detail)
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})")
