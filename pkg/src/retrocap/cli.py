"""Command-line entry points: build-memory, caption, inspect, eval-bleu.

Exit codes: 0 success (per-image failures are reported inline and do not
fail the batch), 1 usage, 2 I/O or data, 3 backend.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .bleu import BleuStats, sentence_bleu4
from .concepts import ClusterConfig
from .fusion import FusionWeights
from .gateway import (
    BackendRequestError,
    BackendUnreachableError,
    GatewayError,
    ImageInput,
    MockGateway,
    SidecarClient,
)
from .memory import IndexFormatError, build_index, load_index, save_index
from .parsing import normalize_text
from .pipeline import caption_image
from .refine import DEFAULT_PREFIX, DecodeConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_BACKEND = 3


class _Parser(argparse.ArgumentParser):
    """argparse's default usage-error exit status is 2; this tool
    reserves 2 for I/O, so usage errors exit 1 instead."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--backend",
        choices=("mock", "sidecar"),
        default="mock",
        help="model backend: deterministic mock or the HTTP sidecar",
    )
    parser.add_argument(
        "--sidecar-url",
        default=None,
        help="sidecar base URL (falls back to MEACAP_SIDECAR_URL)",
    )
    parser.add_argument("--seed", type=int, default=0, help="mock backend seed")


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--memory", required=True, help="memory index file")
    parser.add_argument("--n-retrieve", type=int, default=5, help="captions to retrieve")
    parser.add_argument("--k-w", type=int, default=200, help="candidate words per mask")
    parser.add_argument("--alpha", type=float, default=0.1, help="LM score weight")
    parser.add_argument("--beta", type=float, default=0.4, help="image-text score weight")
    parser.add_argument("--gamma", type=float, default=0.2, help="memory-text score weight")
    parser.add_argument("--tau", type=float, default=0.6, help="clustering similarity threshold")
    parser.add_argument("--max-iters", type=int, default=15, help="refinement iteration cap")
    parser.add_argument(
        "--prefix",
        default=DEFAULT_PREFIX,
        help='sentence prefix; pass "" to disable',
    )
    _add_backend_flags(parser)


def build_parser() -> _Parser:
    parser = _Parser(prog="retrocap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-memory", help="embed a caption corpus into an index file")
    p.add_argument("corpus", help="text file, one caption per line")
    p.add_argument("out", help="output index file")
    p.add_argument("--tag", default="", help="corpus label stored in the index")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_build_memory)

    p = sub.add_parser("caption", help="caption an image file or a directory of them")
    p.add_argument("path", help="image file or directory")
    _add_pipeline_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="images processed concurrently")
    p.add_argument("--trace", default=None, help="write decision trace JSON-lines here")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("inspect", help="dump pipeline intermediates for one image")
    p.add_argument("path", help="image file")
    _add_pipeline_flags(p)
    p.add_argument(
        "--full", action="store_true", help="run refinement too, not just retrieval/filtering"
    )
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("eval-bleu", help="corpus BLEU-4 of caption results vs references")
    p.add_argument("--results", required=True, help="JSON-lines caption results")
    p.add_argument("--references", required=True, help="JSON-lines references per image")
    p.set_defaults(func=cmd_eval_bleu)

    return parser


def _make_gateway(args: argparse.Namespace):
    if args.backend == "mock":
        return MockGateway(seed=args.seed)
    return SidecarClient(base_url=args.sidecar_url)


def _make_configs(args: argparse.Namespace) -> tuple[ClusterConfig, DecodeConfig]:
    cluster = ClusterConfig(tau=args.tau)
    decode = DecodeConfig(
        k_w=args.k_w,
        n_d=args.n_retrieve,
        max_iterations=args.max_iters,
        prefix=args.prefix or None,
        weights=FusionWeights(args.alpha, args.beta, args.gamma),
    )
    return cluster, decode


def cmd_build_memory(args: argparse.Namespace) -> int:
    corpus_path = Path(args.corpus)
    captions = []
    skipped = 0
    with corpus_path.open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                captions.append(line)
            else:
                skipped += 1
    if not captions:
        sys.stderr.write(f"{corpus_path}: no captions found\n")
        return EXIT_IO
    gateway = _make_gateway(args)
    index = build_index(captions, gateway, corpus_tag=args.tag)
    save_index(index, args.out)
    print(
        json.dumps(
            {
                "path": args.out,
                "count": index.count,
                "rejected": index.rejected_count,
                "skipped_blank": skipped,
                "dimension": index.dimension,
            }
        )
    )
    return EXIT_OK


def _iter_image_paths(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.is_file())
    if path.is_file():
        return [path]
    raise FileNotFoundError(f"no such file or directory: {path}")


def cmd_caption(args: argparse.Namespace) -> int:
    index = load_index(args.memory)
    gateway = _make_gateway(args)
    cluster_config, decode_config = _make_configs(args)
    paths = _iter_image_paths(Path(args.path))

    write_lock = threading.Lock()
    trace_handle = open(args.trace, "w", encoding="utf-8") if args.trace else None
    successes = 0
    backend_failures = 0

    def process(path: Path) -> None:
        nonlocal successes, backend_failures
        try:
            image = ImageInput.from_file(path)
            result, intermediates = caption_image(
                image, str(path), index, gateway, cluster_config, decode_config
            )
        except Exception as exc:
            record = {
                "image_path": str(path),
                "error": {"type": type(exc).__name__, "message": str(exc)},
            }
            with write_lock:
                if isinstance(exc, (BackendUnreachableError, BackendRequestError)):
                    backend_failures += 1
                print(json.dumps(record), flush=True)
            return
        with write_lock:
            successes += 1
            print(json.dumps(result.to_json()), flush=True)
            if trace_handle is not None:
                for decision in intermediates.trace.decisions:
                    line = {"image_path": str(path), **decision.to_json()}
                    trace_handle.write(json.dumps(line) + "\n")

    try:
        if args.jobs > 1:
            with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                list(pool.map(process, paths))
        else:
            for path in paths:
                process(path)
    finally:
        if trace_handle is not None:
            trace_handle.close()

    if successes == 0 and backend_failures > 0:
        return EXIT_BACKEND
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    index = load_index(args.memory)
    gateway = _make_gateway(args)
    cluster_config, decode_config = _make_configs(args)
    path = Path(args.path)
    image = ImageInput.from_file(path)

    result, inter = caption_image(
        image, str(path), index, gateway, cluster_config, decode_config
    )
    key_of = dict(inter.key_set.member_map)
    document = {
        "image_path": str(path),
        "retrieved": [
            {"id": entry_id, "caption": caption, "score": score}
            for entry_id, caption, score in zip(
                inter.retrieved.ids, inter.retrieved.captions, inter.retrieved.scores
            )
        ],
        "graphs": [
            {
                "caption": g.source_caption,
                "triplets": [[t.subject, t.predicate, t.object] for t in g.triplets],
                "nodes": list(g.nodes),
            }
            for g in inter.graphs
        ],
        "clusters": [
            {
                "members": [m.text for m in c.members],
                "cf": c.cf,
                "key_concept": key_of.get(normalize_text(c.members[0].text)),
            }
            for c in inter.clusters
        ],
        "key_concepts": list(inter.key_set.concepts),
        "ordering_relations": [list(pair) for pair in inter.key_set.ordering_relations],
    }
    if args.full:
        document["caption"] = result.caption
        document["termination"] = result.termination
        document["timings"] = result.timings
    print(json.dumps(document, indent=2))
    return EXIT_OK


def _load_jsonl(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    return records


def cmd_eval_bleu(args: argparse.Namespace) -> int:
    results = _load_jsonl(args.results)
    references = _load_jsonl(args.references)

    candidates: dict[str, str] = {}
    for record in results:
        image = record.get("image") or record.get("image_path")
        caption = record.get("caption") or record.get("candidate")
        if image is None or caption is None:
            continue
        candidates[str(image)] = str(caption)

    refs: dict[str, list[str]] = {}
    for record in references:
        image = record.get("image") or record.get("image_path")
        ref_list = record.get("references") or record.get("captions")
        if image is None or not ref_list:
            continue
        refs[str(image)] = [str(r) for r in ref_list]

    matched = sorted(set(candidates) & set(refs))
    for image in sorted(set(candidates) - set(refs)):
        sys.stderr.write(f"no references for {image}; excluded\n")
    for image in sorted(set(refs) - set(candidates)):
        sys.stderr.write(f"no candidate for {image}; excluded\n")
    if not matched:
        sys.stderr.write("no candidate/reference pairs matched\n")
        return EXIT_IO

    stats = BleuStats()
    per_image = []
    for image in matched:
        stats.add(candidates[image], refs[image])
        per_image.append(
            {
                "image": image,
                "candidate": candidates[image],
                "references": refs[image],
                "bleu4": sentence_bleu4(candidates[image], refs[image]),
            }
        )
    report = {
        "bleu4": stats.score(),
        "count": len(matched),
        "per_image": per_image,
        "stats": stats.to_json(),
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (BackendUnreachableError, BackendRequestError, GatewayError) as exc:
        sys.stderr.write(f"backend error: {exc}\n")
        return EXIT_BACKEND
    except (OSError, IndexFormatError, UnicodeDecodeError) as exc:
        sys.stderr.write(f"I/O error: {exc}\n")
        return EXIT_IO
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
