"""Command-line entry point: ``instastyle <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Exit status is 0 on success, 2 on invalid arguments and 1 on any other failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint, pipeline
from .core import InvalidArgument
from .sched import sd_schedule, snr_curve
from .select import rank_select
from .toyworld import ToyConfig, make_world
from .train import TrainConfig

log = logging.getLogger("instastyle")

NESTED = {"world": ToyConfig, "pretrain": TrainConfig, "refine": TrainConfig}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    for f in fields(pipeline.PipelineConfig):
        if f.name in NESTED:
            for sub in fields(NESTED[f.name]):
                g.add_argument(_flag(f"{f.name}_{sub.name}"), dest=f"cfg__{f.name}__{sub.name}",
                               type=type(getattr(NESTED[f.name](), sub.name)), default=None)
        elif f.name != "seed":
            g.add_argument(_flag(f.name), dest=f"cfg__{f.name}", type=type(getattr(pipeline.PipelineConfig(), f.name)),
                           default=None)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with PipelineConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    _add_config_flags(p)


def _checkpoint_arg(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--checkpoint", type=Path, required=required,
                   help="instastyle-ckpt file; pretrained from the config when omitted")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="instastyle", description="Two-stage style generation on a synthetic domain.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("snr", help="SNR of the inversion noise per timestep (CSV)"))

    world = sub.add_parser("world", help="toy-world utilities")
    wsub = world.add_subparsers(dest="world_command", required=True, parser_class=_Parser)
    _common(wsub.add_parser("dump", help="print the world parameters as JSON"))

    _common(sub.add_parser("pretrain", help="train the backbone and write pretrain.ckpt.json"))

    p = sub.add_parser("invert", help="inversion noise of a drawn reference")
    _common(p)
    _checkpoint_arg(p)
    p.add_argument("--reference-index", type=int, default=0)

    p = sub.add_parser("generate", help="stage-1 manifest (pretrained checkpoint) or final report (refined)")
    _common(p)
    _checkpoint_arg(p)
    p.add_argument("--reference-index", type=int, default=0)
    p.add_argument("--contents", type=int, nargs="+")

    p = sub.add_parser("select", help="rank-select indices from a manifest")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--keep", type=int, nargs="*", default=[])

    p = sub.add_parser("refine", help="refine the learned token and adapters on manifest selections")
    _common(p)
    _checkpoint_arg(p, required=True)
    p.add_argument("--manifest", type=Path, nargs="+", required=True)
    p.add_argument("--keep", type=int, nargs="*", default=[])

    p = sub.add_parser("mix", help="combine two reference styles")
    _common(p)
    _checkpoint_arg(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--style1-ref", type=int, help="style id of the first reference")
    p.add_argument("--style2-ref", type=int, help="style id of the second reference")

    p = sub.add_parser("sweep", help="experiment tables")
    _common(p)
    _checkpoint_arg(p)
    p.add_argument("--kind", required=True, choices=pipeline.SWEEP_KINDS)

    p = sub.add_parser("run", help="full two-stage pipeline")
    _common(p)
    _checkpoint_arg(p)
    return parser


def load_config(args) -> pipeline.PipelineConfig:
    doc = {}
    if args.config is not None:
        try:
            doc = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidArgument(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise InvalidArgument("config file must hold a JSON object")
    cfg = pipeline.PipelineConfig.from_dict(doc)
    over, nested = {}, {}
    for key, value in vars(args).items():
        if not key.startswith("cfg__") or value is None:
            continue
        parts = key.split("__")[1:]
        if len(parts) == 2:
            nested.setdefault(parts[0], {})[parts[1]] = value
        else:
            over[parts[0]] = value
    for block, values in nested.items():
        over[block] = replace(getattr(cfg, block), **values)
    if args.seed is not None:
        over["seed"] = args.seed
    return replace(cfg, **over).validate()


def _out(args) -> Path | None:
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _emit(args, name: str, text: str) -> None:
    out = _out(args)
    if out is None:
        sys.stdout.write(text)
    else:
        (out / name).write_text(text)


def _dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _model(args, ctx):
    if getattr(args, "checkpoint", None) is not None:
        try:
            model, _ = checkpoint.load(args.checkpoint)
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise InvalidArgument(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
        if model.params.dim != ctx.world.dim:
            raise InvalidArgument("checkpoint latent dim does not match the configured world")
        return model
    log.info("no checkpoint given; pretraining")
    return pipeline.pretrain_model(ctx)


def _reference(ctx, index: int):
    if index < 0:
        raise InvalidArgument("reference index must be non-negative")
    return pipeline.draw_references(ctx, index + 1)[index]


def cmd_snr(args, cfg):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("t", "snr"))
    w.writerows(zip(range(1, cfg.sched_T + 1), snr_curve(sd_schedule(cfg.sched_T)).tolist()))
    _emit(args, "snr.csv", buf.getvalue())


def cmd_world(args, cfg):
    _emit(args, "world.json", _dump_json(make_world(cfg.world).to_dict()))


def cmd_pretrain(args, cfg):
    ctx = pipeline.Context.build(cfg)
    history: list[float] = []
    model = pipeline.pretrain_model(ctx, history)
    out = _out(args) or Path(".")
    checkpoint.save(model, out / "pretrain.ckpt.json", {"config": cfg.to_dict()})
    k = min(200, len(history))
    summary = {"iters": len(history), "loss_first": float(np.mean(history[:k])) if k else None,
               "loss_last": float(np.mean(history[-k:])) if k else None,
               "sha256": checkpoint.digest(model)}
    (out / "pretrain_summary.json").write_text(_dump_json(summary))


def cmd_invert(args, cfg):
    ctx = pipeline.Context.build(cfg)
    model = _model(args, ctx)
    ref = _reference(ctx, args.reference_index)
    ready = model if model.adapters else pipeline.init_token(ctx, model, ref)[0]
    z = pipeline.invert_reference(ctx, ready, ref)
    _emit(args, "z_T.json", _dump_json({"reference_index": args.reference_index, "z_T": z.tolist(),
                                        "z_T_sha256": pipeline.latent_sha256(z)}))


def cmd_generate(args, cfg):
    ctx = pipeline.Context.build(cfg)
    model = _model(args, ctx)
    ref = _reference(ctx, args.reference_index)
    if not model.adapters:
        res = pipeline.stage1(ctx, model, ref, args.contents)
        _emit(args, "manifest.json", _dump_json(res.manifest))
        return
    contents = np.arange(cfg.world.n_content) if args.contents is None else np.asarray(args.contents)
    _, sc = pipeline.generate_final(ctx, model, ref, contents)
    report = pipeline.RunReport(pipeline.run_id(cfg))
    report.add("generate", contents, ref.style_id, sc)
    if _out(args) is None:
        sys.stdout.write(report.to_csv())
    else:
        report.write(args.out)


def _read_manifest(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidArgument(f"cannot read manifest {path}: {exc}") from exc


def cmd_select(args, cfg):
    items = pipeline.manifest_items(_read_manifest(args.manifest))
    n = cfg.n_selected if args.n is None else args.n
    if args.keep:
        from .select import select_items

        chosen = select_items(items, n, args.keep)
    else:
        chosen = rank_select([it.style_s for it in items], [it.content_s for it in items], n)
    _emit(args, "selected.json", _dump_json({"indices": chosen}))


def cmd_refine(args, cfg):
    ctx = pipeline.Context.build(cfg)
    model = _model(args, ctx)
    manifests = [_read_manifest(p) for p in args.manifest]
    refined, chosen = pipeline.stage2(ctx, model, manifests, keep=args.keep)
    out = _out(args) or Path(".")
    checkpoint.save(refined, out / "refined.ckpt.json", {"config": cfg.to_dict(), "selected": chosen})


def cmd_mix(args, cfg):
    s1 = cfg.second_style if args.style1_ref is None else args.style1_ref
    s2 = cfg.reference_style if args.style2_ref is None else args.style2_ref
    cfg = replace(cfg, second_style=s1, reference_style=s2).validate()
    ctx = pipeline.Context.build(cfg)
    model = _model(args, ctx)
    ref1 = pipeline.draw_references(ctx, 1, s1, stream=7)[0]
    ref2 = pipeline.draw_references(ctx, 1, s2)[0]
    pair = pipeline.refine_pair(ctx, model, ref1, ref2)
    contents = np.arange(cfg.world.n_content)
    X, ss = pipeline.combine_styles(ctx, pair, ref1, ref2, contents, args.alpha, args.beta)
    sc = pipeline.score(ctx, X, contents, s2)
    report = pipeline.RunReport(pipeline.run_id(cfg))
    report.add("mix", contents, s2, sc)
    doc = {"alpha": cfg.mix_alpha if args.alpha is None else args.alpha,
           "beta": cfg.mix_beta if args.beta is None else args.beta,
           "style1": s1, "style2": s2, "style_scores": ss.tolist(), "generations": X.tolist()}
    if _out(args) is None:
        sys.stdout.write(report.to_csv())
    else:
        report.write(args.out, "mix")
        (args.out / "mix.json").write_text(_dump_json(doc))


def cmd_sweep(args, cfg):
    if args.kind == "snr-curve":
        cmd_snr(args, cfg)
        return
    ctx = pipeline.Context.build(cfg)
    report = pipeline.sweep(cfg, args.kind, _model(args, ctx))
    name = f"sweep_{args.kind}"
    if _out(args) is None:
        sys.stdout.write(report.to_csv())
    else:
        report.write(args.out, name)


def cmd_run(args, cfg):
    ctx = pipeline.Context.build(cfg)
    model = _model(args, ctx) if args.checkpoint is not None else None
    report = pipeline.run(cfg, _out(args), model)
    if args.out is None:
        sys.stdout.write(report.to_csv())


COMMANDS = {
    "snr": cmd_snr, "world": cmd_world, "pretrain": cmd_pretrain, "invert": cmd_invert,
    "generate": cmd_generate, "select": cmd_select, "refine": cmd_refine, "mix": cmd_mix,
    "sweep": cmd_sweep, "run": cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"instastyle: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        COMMANDS[args.command](args, cfg)
    except InvalidArgument as exc:
        print(f"instastyle: invalid argument: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"instastyle: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
