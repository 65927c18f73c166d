"""``haludetect`` command line: index, detect, calibrate, evaluate, inspect.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend error,
130 interrupted (finished records are still written).
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import sys
from pathlib import Path

import click

from .aggregator import CalibrationSample, Thresholds, calibrate as run_calibration
from .errors import BackendError, ConfigError, DataError, ParseError
from .evaluator import DatasetItem, build_balanced_testset, load_dataset, score
from .gateway import (
    BackendConfig,
    HashingEmbedder,
    HTTPBackend,
    ScriptedBackend,
    ScriptedTranscript,
    TableEmbedder,
    write_atomic,
)
from .pipeline import DetectConfig, Detector, write_outputs
from .prompt_library import FORMS, FORMULATIONS
from .retrieval import DenseIndex, ScriptedSearchService, SearchClient, build_index, chunk_document
from .verdict import Judgment

logger = logging.getLogger(__name__)

EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND, EXIT_INTERRUPTED = 2, 3, 4, 130


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map package errors to exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, str(exc))
        except DataError as exc:
            _fail(EXIT_DATA, f"{type(exc).__name__}: {exc}")
        except BackendError as exc:
            _fail(EXIT_BACKEND, f"{type(exc).__name__}: {exc}")
        except (OSError, json.JSONDecodeError) as exc:
            _fail(EXIT_DATA, str(exc))

    return wrapper


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def _resolve(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_run_config(path: str | Path, overrides: dict | None = None) -> dict:
    """Read the JSON run configuration; non-None ``overrides`` win over file values."""
    path = Path(path)
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    cfg["_base"] = path.resolve().parent
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def make_embedder(spec: dict | None, base: Path):
    spec = spec or {"kind": "hashing"}
    if spec.get("kind", "hashing") == "hashing":
        return HashingEmbedder(int(spec.get("dim", 256)))
    if spec["kind"] == "table":
        table = json.loads(_resolve(base, spec["path"]).read_text(encoding="utf-8"))
        return TableEmbedder(table, HashingEmbedder(int(spec.get("dim", 256))) if spec.get("fallback") else None)
    raise ConfigError(f"unknown embedder kind {spec['kind']!r}")


def make_backend(spec: dict, base: Path):
    kind = spec.get("kind")
    if kind == "scripted":
        if "transcript" not in spec:
            raise ConfigError("scripted backend needs a transcript path")
        transcript = ScriptedTranscript.load(_resolve(base, spec["transcript"]), strict=spec.get("strict", True))
        return ScriptedBackend(transcript, make_embedder(spec.get("embedder"), base))
    if kind == "openai":
        keys = ("base_url", "model_name", "api_key_env", "request_timeout", "max_retries",
                "concurrency_limit", "embedding_model", "cache_dir", "top_logprobs")
        try:
            bc = BackendConfig(**{k: spec[k] for k in keys if k in spec})
        except TypeError as exc:
            raise ConfigError(f"backend config: {exc}") from None
        return HTTPBackend(bc)
    raise ConfigError(f"unknown backend kind {kind!r} (expected 'openai' or 'scripted')")


def make_search(spec: dict | None, base: Path):
    if not spec:
        return None
    if "fixture" in spec:
        return ScriptedSearchService.load(_resolve(base, spec["fixture"]))
    if "url" in spec:
        return SearchClient(spec["url"], float(spec.get("timeout", 30.0)))
    raise ConfigError("search_service needs 'url' or 'fixture'")


def make_detect_config(cfg: dict) -> DetectConfig:
    base = cfg["_base"]
    thresholds = None
    if cfg.get("thresholds"):
        t = dict(cfg["thresholds"])
        t.setdefault("base_form", cfg.get("base_form", "unstructured"))
        thresholds = Thresholds.from_dict(t)
    elif cfg.get("calibration"):
        thresholds = Thresholds.from_dict(
            json.loads(_resolve(base, cfg["calibration"]).read_text(encoding="utf-8")))
    try:
        return DetectConfig(
            task=cfg.get("task", "qa"),
            forms=tuple(cfg.get("forms", FORMS)),
            base_form=cfg.get("base_form", thresholds.base_form if thresholds else "unstructured"),
            mode=cfg.get("mode", "combined"),
            knowledge_source=cfg.get("knowledge_source", "retrieval"),
            k=cfg.get("k"),
            max_steps=int(cfg.get("max_steps", 8)),
            thresholds=thresholds,
            max_knowledge_chars=cfg.get("max_knowledge_chars"),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_items(cfg: dict) -> list[DatasetItem]:
    base = cfg["_base"]
    task = cfg.get("task", "qa")
    if cfg.get("items"):
        items = []
        path = _resolve(base, cfg["items"])
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if line.strip():
                try:
                    items.append(DatasetItem.from_dict(json.loads(line)))
                except (ValueError, KeyError) as exc:
                    raise ParseError(f"{path}: {exc}", lineno) from None
        return items
    if not cfg.get("dataset"):
        raise ConfigError("config needs 'dataset' (HaluEval JSONL) or 'items'")
    records = load_dataset(_resolve(base, cfg["dataset"]), task)
    n_pairs = int(cfg.get("n_pairs", len(records)))
    return build_balanced_testset(records, n_pairs, int(cfg.get("seed", 0)), task)


def _index_provider(index_dir: Path | None):
    if index_dir is None:
        return None
    manifest = json.loads((index_dir / "manifest.json").read_text(encoding="utf-8"))
    by_hash = {d["sha256"]: d["file"] for d in manifest["documents"]}
    cache: dict[str, DenseIndex] = {}

    def provide(item: DatasetItem):
        key = hashlib.sha256(item.question.encode("utf-8")).hexdigest()
        if key not in by_hash:
            return None
        if key not in cache:
            cache[key] = DenseIndex.load(index_dir / by_hash[key])
        return cache[key]

    return provide


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def main(verbose: int):
    """Two-phase hallucination detection for QA answers and summaries."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _read_documents(docs: Path) -> list[tuple[str, str]]:
    if docs.is_dir():
        return [(p.stem, p.read_text(encoding="utf-8")) for p in sorted(docs.glob("*.txt"))]
    out = []
    for lineno, line in enumerate(docs.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            doc_id = str(rec.get("id", rec.get("doc_id", f"doc{lineno}")))
            out.append((doc_id, rec.get("text", rec.get("document", ""))))
        except (ValueError, AttributeError) as exc:
            raise ParseError(f"{docs}: {exc}", lineno) from None
    return out


@main.command()
@click.option("--docs", required=True, type=click.Path(exists=True, path_type=Path),
              help="JSONL with id/text (or document) fields, or a directory of .txt files.")
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Output directory.")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              help="Run config whose backend supplies embeddings (default: offline hashing embedder).")
@click.option("--max-words", default=40, show_default=True, help="Chunks hold fewer than this many words.")
@_guard
def index(docs: Path, out: Path, config_path: Path | None, max_words: int):
    """Chunk and embed documents into per-document dense indexes."""
    if config_path:
        cfg = load_run_config(config_path)
        backend = make_backend(cfg.get("backend", {}), cfg["_base"])
    else:
        backend = ScriptedBackend(ScriptedTranscript(strict=True), HashingEmbedder())
    documents = _read_documents(docs)
    if not documents:
        raise DataError(f"no documents found in {docs}")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for doc_id, text in documents:
        chunks = chunk_document(doc_id, text, max_words)
        idx = build_index(chunks, backend)
        fname = f"{doc_id}.idx"
        idx.save(out / fname)
        entries.append({"doc_id": doc_id, "file": fname, "n_chunks": len(chunks),
                        "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest()})
    write_atomic(out / "manifest.json", json.dumps({"documents": entries}, indent=2, sort_keys=True) + "\n")
    click.echo(f"indexed {len(entries)} document(s), {sum(e['n_chunks'] for e in entries)} chunk(s) -> {out}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--item", "item_id", default=None, help="Only run this item id.")
@click.option("--output-dir", default=None)
@click.option("--workers", type=int, default=None)
@click.option("--n-pairs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--mode", type=click.Choice(FORMULATIONS), default=None)
@click.option("--base-form", type=click.Choice(FORMS), default=None)
@click.option("--knowledge-source", type=click.Choice(("off_the_shelf", "retrieval")), default=None)
@click.option("--max-steps", type=int, default=None)
@click.option("--k", "k", type=int, default=None)
@_guard
def detect(config_path, item_id, output_dir, workers, n_pairs, seed, mode, base_form, knowledge_source,
           max_steps, k):
    """Run detection and write results.jsonl and traces.jsonl."""
    cfg = load_run_config(config_path, {
        "output_dir": output_dir, "workers": workers, "n_pairs": n_pairs, "seed": seed, "mode": mode,
        "base_form": base_form, "knowledge_source": knowledge_source, "max_steps": max_steps, "k": k,
    })
    base = cfg["_base"]
    dconf = make_detect_config(cfg)
    backend = make_backend(cfg.get("backend", {}), base)
    search = make_search(cfg.get("search_service"), base)
    if dconf.task == "qa" and dconf.knowledge_source == "retrieval" and search is None:
        raise ConfigError("knowledge_source 'retrieval' needs a search_service")
    items = load_items(cfg)
    if item_id is not None:
        items = [it for it in items if it.id == item_id]
        if not items:
            raise DataError(f"no item with id {item_id!r}")
    detector = Detector(backend, dconf, search_client=search,
                        index_provider=_index_provider(_resolve(base, cfg.get("index_dir"))))
    out_dir = _resolve(base, cfg.get("output_dir", "out"))
    done: dict = {}
    try:
        records = detector.run(items, int(cfg.get("workers", 1)), done)
    except KeyboardInterrupt:
        finished = [done[i] for i in sorted(done)]
        write_outputs(finished, out_dir)
        click.echo(f"interrupted: wrote {len(finished)} of {len(items)} record(s) to {out_dir}", err=True)
        sys.exit(EXIT_INTERRUPTED)
    results, traces = write_outputs(records, out_dir)
    counts: dict[str, int] = {}
    for r in records:
        counts[r.final] = counts.get(r.final, 0) + 1
    click.echo(f"{len(records)} item(s): " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    click.echo(f"results: {results}\ntraces:  {traces}")


def _judgment(d: dict, form: str | None = None) -> Judgment:
    d = dict(d)
    if form and "form" not in d:
        d["form"] = form
    return Judgment.from_dict(d)


def read_calibration_samples(path: Path, base_form: str) -> tuple[list[CalibrationSample], str]:
    """Samples from detect results (QA or summary) or from simple base/supplement lines."""
    supp_form = FORMS[1 - FORMS.index(base_form)]
    samples, tasks, skipped = [], set(), 0
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            gold = rec["gold"]
            if "base" in rec:
                base = _judgment(rec["base"], base_form)
                if base.form != base_form:
                    raise ValueError(f"base judgment form {base.form!r} != --base-form {base_form!r}")
                samples.append(CalibrationSample(str(rec["item_id"]), base,
                                                 _judgment(rec["supplement"], supp_form), gold))
                tasks.add(rec.get("task", "qa"))
            elif rec.get("task") == "summary":
                tasks.add("summary")
                for seg in rec.get("segments", []):
                    j = seg["judgments"]
                    samples.append(CalibrationSample(rec["item_id"], _judgment(j[base_form]),
                                                     _judgment(j[supp_form]), gold))
            else:
                tasks.add("qa")
                j = rec.get("judgments") or {}
                if base_form in j and supp_form in j:
                    samples.append(CalibrationSample(rec["item_id"], _judgment(j[base_form]),
                                                     _judgment(j[supp_form]), gold))
                else:
                    skipped += 1
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"{path}: {exc}", lineno) from None
    if skipped:
        logger.warning("skipped %d record(s) without judgments in both forms", skipped)
    if len(tasks) > 1:
        raise ParseError(f"{path}: mixes QA and summary records")
    return samples, (tasks.pop() if tasks else "qa")


@main.command("calibrate")
@click.option("--validation", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--base-form", required=True, type=click.Choice(FORMS))
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Write the report here as well.")
@_guard
def calibrate_cmd(validation: Path, base_form: str, out: Path | None):
    """Search the quantile grid for the two aggregation thresholds."""
    samples, task = read_calibration_samples(validation, base_form)
    result = run_calibration(samples, task)
    text = json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
    if out:
        write_atomic(out, text)
    click.echo(text, nl=False)


@main.command()
@click.option("--results", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--json", "as_json", is_flag=True, help="Print the JSON report instead of the table.")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Write the JSON report here.")
@_guard
def evaluate(results: Path, as_json: bool, out: Path | None):
    """Score results (lines with gold and final) into TPR/TNR/Avg Acc/ARP/ARN."""
    outcomes = []
    for lineno, line in enumerate(results.read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                rec = json.loads(line)
                outcomes.append((rec["gold"], rec["final"]))
            except (ValueError, KeyError) as exc:
                raise ParseError(f"{results}: {exc}", lineno) from None
    try:
        report = score(outcomes)
    except ValueError as exc:
        raise ParseError(f"{results}: {exc}") from None
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if out:
        write_atomic(out, payload)
    click.echo(payload if as_json else report.to_text(), nl=not as_json)


@main.command()
@click.option("--traces", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--item", "item_id", default=None)
@_guard
def inspect(traces: Path, item_id: str | None):
    """Print reasoning traces in the prompt layout."""
    shown = 0
    for line in traces.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if item_id is not None and rec["item_id"] != item_id:
            continue
        shown += 1
        t, j = rec["trace"], rec["judgment"]
        seg = "" if rec.get("segment") is None else f" segment {rec['segment']}"
        click.echo(f"== {rec['item_id']}{seg} [{rec['form']}] terminated={t['terminated']}")
        for s in t["steps"]:
            click.echo(f"#Thought-{s['k']}#: {s['thought']}")
            if s.get("query"):
                click.echo(f"#Query-{s['k']}#: {s['query']['line']}")
                click.echo(f"#Knowledge-{s['k']}#: {s['knowledge']['raw_text']}")
        for n in t.get("notes", []):
            click.echo(f"  note: {n}")
        click.echo(f"#Judgment#: {j['label']} (confidence {j['confidence']:.6f})\n")
    if not shown:
        raise DataError("no matching traces")


if __name__ == "__main__":  # pragma: no cover
    main()
