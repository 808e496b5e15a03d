"""Command-line entry point: ``bfad scan|extract|profile|library|detect|synth``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from bfad.embeddings import DEFAULT_MODEL_ID, HashedTokenProvider, HttpEmbeddingProvider, SentenceTransformerProvider
from bfad.evaluation import (
    AllRequestsFailedError,
    DatasetManifest,
    ManifestError,
    run_evaluation,
    split_manifest,
)
from bfad.extraction import ExtractionConfig, Strategy, extract
from bfad.llm import ChatClassifier, LlmConfig, LlmError, StubChatTransport
from bfad.pipeline import Detector, DetectorSettings, PromptMode, build_library
from bfad.profiling import (
    DegenerateCorpusError,
    RatioTransform,
    ScoreParams,
    UninformativeCorpusError,
    WeightVector,
    compute_corpus_stats,
    compute_weights,
)
from bfad.registry import RegistryError, load_default_registry, load_registry_from_file
from bfad.retrieval import DemonstrationLibrary, LabelRequirement
from bfad.scanner import ScanOptions, SourceFile, discover_php_files, scan

log = logging.getLogger("bfad")

EXIT_OK, EXIT_IO, EXIT_DEGENERATE, EXIT_ALL_FAILED = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    registry: str | None = None
    tau: int = 300
    budget_tokens: int = 3072
    strategy: str = "hybrid"
    count_in_strings: bool = False
    require_preg_e: bool = False
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    ratio_transform: str = "squash"
    uniform_weights: bool = False
    embedding: str = "hashed"
    embedding_url: str | None = None
    embedding_model: str = DEFAULT_MODEL_ID
    embedding_dim: int = 256
    endpoint_url: str = "http://localhost:8000/v1"
    model: str = "gpt-4"
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    max_tokens: int = 256
    timeout: float = 60.0
    max_retries: int = 3
    max_concurrent: int = 4
    stub: bool = False
    stub_threshold: int = 3
    seed: int = 0
    library_fraction: float = 0.6
    k: int = 1
    require_label: str = "any"
    unparseable_as: str = "benign"
    mode: str = "bfad"

    @classmethod
    def layered(cls, file_values: dict, cli_values: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**{**file_values, **{k: v for k, v in cli_values.items() if k in known}})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.extraction()
            self.scan_options()
            self.llm()
            self.score_params()
            RatioTransform(self.ratio_transform)
            LabelRequirement(self.require_label)
            PromptMode(self.mode)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if self.unparseable_as not in ("benign", "webshell"):
            raise ConfigError("unparseable_as must be 'benign' or 'webshell'")
        if self.embedding not in ("hashed", "http", "st"):
            raise ConfigError("embedding must be one of hashed, http, st")
        if self.embedding == "http" and not self.embedding_url:
            raise ConfigError("embedding 'http' needs embedding_url")
        if not 0 < self.library_fraction < 1 or self.k <= 0:
            raise ConfigError("library_fraction must be in (0, 1) and k positive")

    def extraction(self) -> ExtractionConfig:
        return ExtractionConfig(tau=self.tau, budget_tokens=self.budget_tokens, strategy=Strategy(self.strategy))

    def scan_options(self) -> ScanOptions:
        return ScanOptions(count_in_strings=self.count_in_strings, require_preg_e=self.require_preg_e)

    def score_params(self) -> ScoreParams:
        return ScoreParams(self.alpha, self.beta, self.gamma)

    def llm(self) -> LlmConfig:
        return LlmConfig(
            endpoint_url=self.endpoint_url,
            model_id=self.model,
            api_key_env_var=self.api_key_env,
            temperature=self.temperature,
            max_output_tokens=self.max_tokens,
            request_timeout_s=self.timeout,
            max_retries=self.max_retries,
            max_concurrent_requests=self.max_concurrent,
        )

    def settings(self) -> DetectorSettings:
        return DetectorSettings(
            self.extraction(), self.scan_options(), self.k, LabelRequirement(self.require_label), PromptMode(self.mode)
        )

    def registry_obj(self):
        return load_registry_from_file(self.registry) if self.registry else load_default_registry()

    def provider(self):
        if self.embedding == "http":
            return HttpEmbeddingProvider(self.embedding_url, self.embedding_model)
        if self.embedding == "st":
            return SentenceTransformerProvider()
        return HashedTokenProvider(self.embedding_dim)


def _shared_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = p.add_argument_group("common")
    g.add_argument("--config", help="JSON config file; flags override its values")
    g.add_argument("--registry", help="critical-function registry file (default: built-in list)")
    g.add_argument("--seed", type=int, help="seed for splits and retry jitter (default 0)")
    g.add_argument("--count-in-strings", action="store_true", help="also count calls spelled inside string literals")
    g.add_argument("--require-preg-e", action="store_true", help="count preg_replace only with a literal /e pattern")
    g.add_argument("--log-level", default="WARNING", help="diagnostic verbosity (default WARNING)")
    return p


def _add_extraction_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("extraction")
    g.add_argument("--tau", type=int, help="context radius around each call, in bytes (default 300)")
    g.add_argument("--budget-tokens", type=int, help="token budget for extracted code (default 3072)")
    g.add_argument("--strategy", choices=[s.value for s in Strategy], help="critical or hybrid (default hybrid)")


def _add_weight_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("weights")
    g.add_argument("--alpha", type=float, help="coverage-difference coefficient (default 1)")
    g.add_argument("--beta", type=float, help="frequency-ratio coefficient (default 1)")
    g.add_argument("--gamma", type=float, help="usage-ratio coefficient (default 1)")
    g.add_argument("--ratio-transform", choices=[t.value for t in RatioTransform], help="ratio squashing (default squash)")
    g.add_argument("--uniform-weights", action="store_true", help="fall back to uniform weights on an uninformative corpus")
    g.add_argument("--library-fraction", type=float, help="stratified library share when splitting (default 0.6)")


def _add_embedding_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("embeddings")
    g.add_argument("--embedding", choices=["hashed", "http", "st"], help="embedding provider (default hashed)")
    g.add_argument("--embedding-url", help="embeddings endpoint for --embedding http")
    g.add_argument("--embedding-model", help=f"embedding model id (default {DEFAULT_MODEL_ID})")
    g.add_argument("--embedding-dim", type=int, help="hashed provider dimension (default 256)")


def build_parser() -> argparse.ArgumentParser:
    shared = _shared_parser()
    parser = argparse.ArgumentParser(prog="bfad", description="Behavior-anchored LLM WebShell detection for PHP.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, **kwargs) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[shared], argument_default=argparse.SUPPRESS, **kwargs)

    p = add("scan", help="list critical-function calls as JSON")
    p.add_argument("paths", nargs="+", help="PHP files or directories (searched recursively for *.php)")

    p = add("extract", help="print the extracted code view of one file")
    p.add_argument("path")
    _add_extraction_args(p)

    p = add("profile", help="compute corpus statistics and category weights")
    p.add_argument("--manifest", required=True, help="JSONL manifest of labeled files")
    p.add_argument("--out", help="write the weights JSON here as well")
    p.add_argument("--split", action="store_true", help="use only the library share of a seeded split")
    _add_weight_args(p)

    p = add("library", help="build and persist a demonstration library")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="library directory")
    p.add_argument("--weights", help="weights JSON to use instead of computing them")
    p.add_argument("--split", action="store_true", help="use only the library share of a seeded split")
    _add_extraction_args(p)
    _add_weight_args(p)
    _add_embedding_args(p)

    p = add("detect", help="classify files, or evaluate a labeled manifest")
    p.add_argument("paths", nargs="*", help="PHP files or directories to classify")
    p.add_argument("--manifest", help="labeled JSONL manifest; produces a full evaluation report")
    p.add_argument("--library", help="demonstration library directory (default: built from the manifest split)")
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--csv", help="per-file CSV companion path")
    p.add_argument("--stub", action="store_true", help="offline stub endpoint instead of a live model")
    p.add_argument("--stub-threshold", type=int, help="stub answers WebShell at this many critical calls (default 3)")
    p.add_argument("--no-icl", action="store_true", help="omit the demonstration")
    p.add_argument("--k", type=int, help="demonstrations per prompt (default 1)")
    p.add_argument("--require-label", choices=[r.value for r in LabelRequirement], help="demonstration label policy (default any)")
    p.add_argument("--mode", choices=[m.value for m in PromptMode], help="bfad views or vanilla full-file prompt")
    p.add_argument("--unparseable-as", choices=["benign", "webshell"], help="prediction for unparseable replies (default benign)")
    g = p.add_argument_group("llm")
    g.add_argument("--endpoint-url", help="chat-completions base URL")
    g.add_argument("--model", help="model id sent to the endpoint")
    g.add_argument("--api-key-env", help="environment variable holding the API key")
    g.add_argument("--temperature", type=float)
    g.add_argument("--max-tokens", type=int, help="max output tokens (default 256)")
    g.add_argument("--timeout", type=float, help="request timeout in seconds")
    g.add_argument("--max-retries", type=int)
    g.add_argument("--max-concurrent", type=int, help="requests in flight at once")
    _add_extraction_args(p)
    _add_weight_args(p)
    _add_embedding_args(p)

    p = add("synth", help="write a seeded synthetic corpus and manifest")
    p.add_argument("directory")
    p.add_argument("--webshells", type=int, default=100)
    p.add_argument("--benign", type=int, default=100)
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    file_values = {}
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a JSON object")
    return RunConfig.layered(file_values, vars(args))


def _emit(doc, out: str | None = None) -> None:
    text = json.dumps(doc, indent=2, ensure_ascii=False) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_scan(args, cfg: RunConfig) -> int:
    registry = cfg.registry_obj()
    files, missing = discover_php_files(args.paths)
    status = EXIT_OK
    for path in missing:
        print(f"bfad: {path}: no such file or directory", file=sys.stderr)
        status = EXIT_IO
    rows = []
    for path in files:
        try:
            source = SourceFile.from_path(path)
        except OSError as exc:
            print(f"bfad: {path}: {exc.strerror}", file=sys.stderr)
            status = EXIT_IO
            continue
        rows += [{"path": str(path), **occ.to_dict()} for occ in scan(source, registry, cfg.scan_options())]
    _emit(rows)
    return status


def cmd_extract(args, cfg: RunConfig) -> int:
    try:
        source = SourceFile.from_path(args.path)
    except OSError as exc:
        print(f"bfad: {args.path}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    occurrences = scan(source, cfg.registry_obj(), cfg.scan_options())
    view = extract(source, occurrences, cfg.extraction())
    sys.stdout.buffer.write(view.rendered_text.encode("utf-8"))
    sys.stdout.flush()
    return EXIT_OK


def _library_manifest(args, cfg: RunConfig) -> DatasetManifest:
    manifest = DatasetManifest.load(args.manifest)
    if manifest.has_splits:
        return manifest.with_split("library")
    if getattr(args, "split", False):
        return split_manifest(manifest, cfg.library_fraction, cfg.seed)[0]
    return manifest


def cmd_profile(args, cfg: RunConfig) -> int:
    manifest = _library_manifest(args, cfg)
    stats = compute_corpus_stats(manifest.sources(), cfg.registry_obj(), cfg.scan_options())
    try:
        weights = compute_weights(stats, cfg.score_params(), cfg.ratio_transform)
    except UninformativeCorpusError:
        if not cfg.uniform_weights:
            raise
        weights = WeightVector.uniform()
    if getattr(args, "out", None):
        weights.save(args.out)
    _emit({"weights": weights.to_dict(), "stats": stats.to_dict()})
    return EXIT_OK


def _build_library(manifest: DatasetManifest, cfg: RunConfig, weights: WeightVector | None = None):
    return build_library(
        manifest.sources(),
        cfg.registry_obj(),
        cfg.provider(),
        cfg.extraction(),
        cfg.scan_options(),
        weights,
        cfg.score_params(),
        cfg.ratio_transform,
        cfg.uniform_weights,
    )


def cmd_library(args, cfg: RunConfig) -> int:
    weights = WeightVector.load(args.weights) if getattr(args, "weights", None) else None
    library, stats = _build_library(_library_manifest(args, cfg), cfg, weights)
    library.save(args.out)
    _emit({"library": args.out, "profiles": len(library.profiles), "weights": library.weights.to_dict()})
    return EXIT_OK


def cmd_detect(args, cfg: RunConfig) -> int:
    registry = cfg.registry_obj()
    transport = StubChatTransport(registry, cfg.stub_threshold) if cfg.stub else None
    use_icl = not getattr(args, "no_icl", False) and cfg.mode == PromptMode.BFAD.value

    manifest = DatasetManifest.load(args.manifest) if getattr(args, "manifest", None) else None
    library = None
    eval_manifest = manifest
    if getattr(args, "library", None):
        library = DemonstrationLibrary.load(args.library)
        if manifest is not None and manifest.has_splits:
            eval_manifest = manifest.with_split("eval")
    elif manifest is not None and use_icl:
        if manifest.has_splits:
            lib_manifest, eval_manifest = manifest.with_split("library"), manifest.with_split("eval")
        else:
            lib_manifest, eval_manifest = split_manifest(manifest, cfg.library_fraction, cfg.seed)
        library, _ = _build_library(lib_manifest, cfg)
    if not use_icl:
        library = None

    effective = dataclasses.asdict(cfg)
    with ChatClassifier(cfg.llm(), transport=transport, seed=cfg.seed) as classifier:
        detector = Detector(registry, cfg.provider(), classifier, library, cfg.settings())
        if eval_manifest is not None:
            try:
                report = run_evaluation(eval_manifest, detector, cfg.unparseable_as, config=effective)
            except AllRequestsFailedError as exc:
                print(f"bfad: {exc}", file=sys.stderr)
                _write_report(exc.report, args)
                return EXIT_ALL_FAILED
            _write_report(report, args)
            return EXIT_OK
        return _detect_paths(args, detector)


def _write_report(report, args) -> None:
    if getattr(args, "out", None):
        report.write(args.out, getattr(args, "csv", None))
    else:
        _emit(report.to_dict())
        if getattr(args, "csv", None):
            report.write(Path(args.csv).with_suffix(".json"), args.csv)


def _detect_paths(args, detector: Detector) -> int:
    files, missing = discover_php_files(args.paths)
    if not files and not missing:
        print("bfad: detect needs file paths or --manifest", file=sys.stderr)
        return EXIT_IO
    status = EXIT_IO if missing else EXIT_OK
    for path in missing:
        print(f"bfad: {path}: no such file or directory", file=sys.stderr)
    rows, failures = [], 0
    for path in files:
        row = {"path": str(path)}
        try:
            analysis = detector.analyze(SourceFile.from_path(path))
            verdict = detector.classify(analysis)
            row.update(verdict=verdict.label.value, raw_response=verdict.raw_response, latency_ms=verdict.latency_ms)
            if analysis.demonstrations:
                demo, score = analysis.demonstrations[0]
                row.update(demo_id=demo.file_id, similarity=score)
        except LlmError as exc:
            failures += 1
            row.update(verdict="unparseable", error=f"{type(exc).__name__}: {exc}")
        except (OSError, ValueError) as exc:
            status = EXIT_IO
            row.update(verdict="unparseable", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    _emit(rows, getattr(args, "out", None))
    if files and failures == len(files):
        return EXIT_ALL_FAILED
    return status


def cmd_synth(args, cfg: RunConfig) -> int:
    from bfad.synthetic import write_corpus

    manifest = write_corpus(args.directory, args.webshells, args.benign, cfg.seed)
    _emit({"directory": args.directory, "files": len(manifest)})
    return EXIT_OK


COMMANDS = {
    "scan": cmd_scan,
    "extract": cmd_extract,
    "profile": cmd_profile,
    "library": cmd_library,
    "detect": cmd_detect,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(args, "log_level", "WARNING").upper(), format="bfad: %(levelname)s: %(message)s", stream=sys.stderr
    )
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"bfad: config error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DegenerateCorpusError, UninformativeCorpusError) as exc:
        print(f"bfad: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (RegistryError, ManifestError, OSError) as exc:
        print(f"bfad: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
