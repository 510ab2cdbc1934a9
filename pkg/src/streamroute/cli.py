"""Command-line front end.

Subcommands: gen-synthetic, train, simulate, sweep, evaluate, and
serve-stub-expert. Everything is driven by a TOML config file; any scalar
in it can be overridden with repeated `--set section.key=value` flags, and
`--seed` rebases all derived seeds. Exit codes: 0 success, 1 bad usage or
invalid config/data, 2 unexpected runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .dataset_io import DatasetFormatError, load_dataset, save_dataset
from .encoder import (
    ConfidenceModel,
    EncoderConfig,
    load_checkpoint,
    load_trace,
    oracle_for_dataset,
    save_checkpoint,
    train,
)
from .expert import HttpExpert, LocalOracleExpert, StubBehavior, StubExpertServer
from .harness import (
    DecisionLog,
    LatencyModel,
    PRESETS,
    compute_metrics,
    evaluate,
    resolve_deferrals,
    sweep,
)
from .losses import LossConfig
from .router import RouterConfig
from .stream import StreamConfig, split_by_video
from .synthetic import SyntheticConfig, generate_dataset


class CliError(Exception):
    """User-facing validation problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1 instead of argparse's 2
        self.print_usage(sys.stderr)
        raise CliError(message)


def _parse_value(raw: str):
    if "," in raw:
        return [_parse_value(part) for part in raw.split(",") if part.strip()]
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


def _load_config(path: str | None, sets: list[str], seed: int | None) -> dict:
    cfg: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file not found: {p}")
        try:
            with open(p, "rb") as fh:
                cfg = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise CliError(f"{p}: invalid TOML ({exc})") from exc
    for assignment in sets:
        if "=" not in assignment:
            raise CliError(f"--set expects section.key=value, got {assignment!r}")
        key, raw = assignment.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise CliError(f"--set {key}: {part!r} is not a section")
        node[parts[-1]] = _parse_value(raw.strip())
    if seed is not None:
        cfg["seed"] = seed
    cfg.setdefault("seed", 0)
    return cfg


def _section(cfg: dict, name: str) -> dict:
    value = cfg.get(name, {})
    if not isinstance(value, dict):
        raise CliError(f"config section [{name}] must be a table")
    return value


def _stream_config(cfg: dict) -> StreamConfig:
    s = _section(cfg, "stream")
    return StreamConfig(
        window_len=int(s.get("window_len", 32)),
        interval=int(s.get("interval", 1)),
        text_agg=int(s.get("text_agg", 2)),
        audio_agg=int(s.get("audio_agg", 4)),
    )


def _latency_model(cfg: dict) -> LatencyModel:
    s = _section(cfg, "latency")
    return LatencyModel(
        encoder_cost_s=float(s.get("encoder_cost_s", 0.1)),
        expert_cost_s=float(s.get("expert_cost_s", 0.8)),
        defer_delay_s=float(s.get("defer_delay_s", 1.0)),
    )


def _router_config(cfg: dict) -> RouterConfig:
    s = _section(cfg, "router")
    preset = s.get("preset")
    if preset:
        if preset not in PRESETS:
            raise CliError(
                f"unknown router preset {preset!r}; choices: {sorted(PRESETS)}"
            )
        return PRESETS[preset]
    return RouterConfig(
        max_enc=int(s.get("max_enc", 18)),
        max_defer=int(s.get("max_defer", 6)),
        strategy=s.get("strategy", "threshold"),
        deferral_source=s.get("deferral_source", "expert"),
    )


def _loss_config(cfg: dict) -> LossConfig:
    s = _section(cfg, "train")
    return LossConfig(
        alpha=float(s.get("alpha", 0.25)),
        beta=float(s.get("beta", 1.0)),
        tau=float(s.get("tau", 0.07)),
    )


def _encoder_config(cfg: dict) -> EncoderConfig:
    s = _section(cfg, "train")
    return EncoderConfig(
        enc_layers=int(s.get("enc_layers", 2)),
        fusion_layers=int(s.get("fusion_layers", 2)),
        head_layers=int(s.get("head_layers", 2)),
        hidden_dim=int(s.get("hidden_dim", 32)),
        learning_rate=float(s.get("learning_rate", 1e-2)),
        epochs=int(s.get("epochs", 10)),
        batch_size=int(s.get("batch_size", 64)),
        seed=int(s.get("seed", cfg["seed"])),
    )


def _synthetic_config(cfg: dict) -> SyntheticConfig:
    s = _section(cfg, "synthetic")
    return SyntheticConfig(
        n_videos=int(s.get("n_videos", 20)),
        duration=int(s.get("duration", 240)),
        n_classes=int(s.get("n_classes", 2)),
        seg_len_min=int(s.get("seg_len_min", 20)),
        seg_len_max=int(s.get("seg_len_max", 60)),
        informative_fraction=float(s.get("informative_fraction", 0.5)),
        signal_scale=float(s.get("signal_scale", 1.5)),
        noise_scale=float(s.get("noise_scale", 1.0)),
        dim_visual=int(s.get("dim_visual", 8)),
        dim_text=int(s.get("dim_text", 8)),
        dim_audio=int(s.get("dim_audio", 8)),
        unlabeled_gap_prob=float(s.get("unlabeled_gap_prob", 0.0)),
        gap_len_min=int(s.get("gap_len_min", 2)),
        gap_len_max=int(s.get("gap_len_max", 10)),
        alternate_labels=bool(s.get("alternate_labels", False)),
        seed=int(s.get("seed", cfg["seed"])),
        name=str(s.get("name", "synthetic")),
    )


def _confidence_model(s: dict) -> ConfidenceModel:
    kind = s.get("confidence", "calibrated")
    if kind == "constant":
        return ConfidenceModel.constant(float(s.get("confidence_value", 0.9)))
    if kind == "calibrated":
        return ConfidenceModel.calibrated()
    if kind == "uniform":
        return ConfidenceModel.uniform(
            float(s.get("confidence_low", 0.6)), float(s.get("confidence_high", 0.95))
        )
    if kind == "banded":
        return ConfidenceModel.banded(
            float(s.get("confidence_low", 0.8)),
            float(s.get("confidence_high", 0.99)),
            float(s.get("confidence_wrong_low", 0.5)),
            float(s.get("confidence_wrong_high", 0.75)),
        )
    raise CliError(f"unknown confidence model {kind!r}")


def _load_dataset_arg(cfg: dict, args):
    path = getattr(args, "dataset", None) or _section(cfg, "dataset").get("path")
    if not path:
        raise CliError("no dataset given (use --dataset or [dataset].path)")
    return load_dataset(path)


def _build_scorer(cfg: dict, dataset):
    s = _section(cfg, "scorer")
    kind = s.get("kind", "oracle")
    if kind == "oracle":
        return oracle_for_dataset(
            dataset,
            flip_prob=float(s.get("flip_prob", 0.3)),
            confidence_model=_confidence_model(s),
            seed=int(s.get("seed", cfg["seed"] + 1)),
        )
    if kind == "checkpoint":
        path = s.get("checkpoint")
        if not path:
            raise CliError("[scorer].checkpoint is required for kind=checkpoint")
        return load_checkpoint(path)
    if kind == "trace":
        path = s.get("trace")
        if not path:
            raise CliError("[scorer].trace is required for kind=trace")
        return load_trace(path)
    raise CliError(f"unknown scorer kind {kind!r}")


def _build_expert(cfg: dict, dataset):
    s = _section(cfg, "expert")
    kind = s.get("kind", "oracle")
    if kind == "none":
        return None
    # presets that run without the expert override whatever [expert] says
    if _section(cfg, "router").get("preset") in ("encoder_only", "no_vlm"):
        return None
    if kind == "oracle":
        labels = {v.video_id: v.labels for v in dataset.videos}
        return LocalOracleExpert(
            labels,
            flip_prob=float(s.get("flip_prob", 0.05)),
            confidence_model=_confidence_model(s),
            fixed_latency_ms=float(s.get("fixed_latency_ms", 800.0)),
            seed=int(s.get("seed", cfg["seed"] + 2)),
            n_classes=dataset.n_classes,
        )
    if kind == "remote":
        return HttpExpert(
            endpoint=s.get("endpoint") or None,
            timeout_ms=float(s["timeout_ms"]) if "timeout_ms" in s else None,
        )
    raise CliError(f"unknown expert kind {kind!r}")


def _write_report(report, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _default_sim_toml(dataset_path: str, seed: int) -> str:
    return (
        f'seed = {seed}\n\n'
        f'[dataset]\npath = "{dataset_path}"\n\n'
        f'[scorer]\nkind = "oracle"\nflip_prob = 0.3\nconfidence = "banded"\n\n'
        f'[expert]\nkind = "oracle"\nflip_prob = 0.05\nconfidence = "banded"\n'
        f'confidence_low = 0.93\nconfidence_high = 1.0\nfixed_latency_ms = 800.0\n\n'
        f'[router]\nmax_enc = 18\nmax_defer = 6\ndeferral_source = "expert"\n'
    )


def cmd_gen_synthetic(cfg: dict, args) -> int:
    out = Path(args.out)
    dataset = generate_dataset(_synthetic_config(cfg))
    save_dataset(dataset, out)
    (out / "sim.toml").write_text(_default_sim_toml(str(out), int(cfg["seed"])))
    n_labeled = sum(int((v.labels != -1).sum()) for v in dataset.videos)
    print(
        f"wrote {len(dataset.videos)} videos x {dataset.videos[0].duration}s "
        f"({n_labeled} labeled timestamps) to {out}"
    )
    return 0


def cmd_train(cfg: dict, args) -> int:
    dataset = _load_dataset_arg(cfg, args)
    stream_config = _stream_config(cfg)
    train_section = _section(cfg, "train")
    fraction = float(train_section.get("train_fraction", 0.0))
    if fraction:
        dataset, holdout = split_by_video(dataset, fraction, int(cfg["seed"]))
        print(f"holding out {len(holdout.videos)} videos for evaluation")
    scorer, log = train(dataset, _encoder_config(cfg), _loss_config(cfg), stream_config)
    save_checkpoint(scorer, args.out)
    print(
        f"trained {scorer.theta.size} params, {log.n_examples} windows, "
        f"final epoch loss {log.epoch_loss[-1]:.4f}, train acc "
        f"{log.train_accuracy:.4f} -> {args.out}"
    )
    if args.log:
        with open(args.log, "w") as fh:
            json.dump(
                {
                    "epoch_loss": log.epoch_loss,
                    "epoch_ce": log.epoch_ce,
                    "epoch_contrastive": log.epoch_contrastive,
                    "train_accuracy": log.train_accuracy,
                    "n_examples": log.n_examples,
                },
                fh,
                indent=2,
            )
            fh.write("\n")
    return 0


def cmd_simulate(cfg: dict, args) -> int:
    dataset = _load_dataset_arg(cfg, args)
    scorer = _build_scorer(cfg, dataset)
    expert = _build_expert(cfg, dataset)
    report, log = evaluate(
        dataset,
        scorer,
        expert,
        _router_config(cfg),
        _latency_model(cfg),
        _stream_config(cfg),
    )
    if args.out_log:
        log.write_jsonl(args.out_log)
    _write_report(report, args.out_report)
    print(
        f"acc={report.accuracy:.4f} macro_f1={report.macro_f1:.4f} "
        f"vlm_invoc={report.vlm_invoc_rate:.3f} "
        f"(suc {report.vlm_suc_rate:.3f} + defer {report.vlm_defer_rate:.3f}) "
        f"avg_latency={report.avg_latency_s:.3f}s -> {args.out_report}"
    )
    return 0


def cmd_sweep(cfg: dict, args) -> int:
    dataset = _load_dataset_arg(cfg, args)
    scorer = _build_scorer(cfg, dataset)
    expert = _build_expert(cfg, dataset)
    s = _section(cfg, "sweep")

    def _as_list(value):
        return list(value) if isinstance(value, (list, tuple)) else [value]

    max_enc_values = [int(v) for v in _as_list(s.get("max_enc", [0, 6, 12, 18, 24, 30]))]
    max_defer_values = [int(v) for v in _as_list(s.get("max_defer", [0, 2, 4, 6, 8, 10]))]
    result = sweep(
        dataset,
        scorer,
        expert,
        max_enc_values,
        max_defer_values,
        _latency_model(cfg),
        _stream_config(cfg),
    )
    result.to_csv(args.out)
    print(f"wrote {len(result.rows)} rows to {args.out}")
    return 0


def cmd_evaluate(cfg: dict, args) -> int:
    dataset = _load_dataset_arg(cfg, args)
    log = DecisionLog.read_jsonl(args.log)
    resolved = resolve_deferrals(log, _latency_model(cfg))
    report = compute_metrics(resolved, dataset)
    _write_report(report, args.out)
    print(
        f"acc={report.accuracy:.4f} macro_f1={report.macro_f1:.4f} "
        f"({report.counts.n_scored} scored timestamps) -> {args.out}"
    )
    return 0


def cmd_serve_stub(cfg: dict, args) -> int:
    oracle = None
    if args.dataset:
        dataset = load_dataset(args.dataset)
        labels = {v.video_id: v.labels for v in dataset.videos}
        oracle = LocalOracleExpert(
            labels,
            flip_prob=args.flip_prob,
            confidence_model=ConfidenceModel.calibrated(),
            seed=int(cfg["seed"]),
            n_classes=dataset.n_classes,
        )
    behavior = StubBehavior(
        label=args.label,
        confidence=args.confidence,
        delay_s=args.delay_ms / 1000.0,
        oracle=oracle,
    )
    server = StubExpertServer(behavior, host=args.host, port=args.port)
    print(f"stub expert listening on {server.endpoint} (ctrl-c to stop)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="streamroute", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser(
        "gen-synthetic", parents=[common],
        help="generate a synthetic dataset directory",
    )
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=cmd_gen_synthetic)

    p = sub.add_parser("train", parents=[common], help="train the window scorer")
    p.add_argument("--dataset", help="dataset directory (defaults to [dataset].path)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="optional JSON training-log path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("simulate", parents=[common], help="run the full routing pipeline")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--out-report", required=True, help="metrics JSON output")
    p.add_argument("--out-log", help="decision-log JSONL output")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common], help="grid over max_enc x max_defer")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("evaluate", parents=[common], help="score an existing decision log")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--log", required=True, help="decision-log JSONL to score")
    p.add_argument("--out", required=True, help="metrics JSON output")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("serve-stub-expert", parents=[common], help="run the wire-protocol stub server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8808)
    p.add_argument("--label", default="", help="canned label (default: first requested)")
    p.add_argument("--confidence", type=float, default=0.9)
    p.add_argument("--delay-ms", type=float, default=0.0)
    p.add_argument("--dataset", help="answer from a ground-truth oracle instead")
    p.add_argument("--flip-prob", type=float, default=0.0)
    p.set_defaults(fn=cmd_serve_stub)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args.config, args.set, args.seed)
        return args.fn(cfg, args)
    except (CliError, DatasetFormatError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # noqa: BLE001 — runtime failures map to exit 2
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
