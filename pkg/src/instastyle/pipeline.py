"""Two-stage style generation on the toy domain, sweeps and tabular reports.

Stage 1 inverts one reference under a prompt whose learned style token starts
as a copy of the nearest seen style, then samples a prompt set from that
single inversion noise. Stage 2 picks the best generations by rank, refines the
learned token and the key/value adapters on them, and the final generation
re-inverts the reference with the refined state.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .core import InvalidArgument, Rng, as_latent, gaussian, split
from .ddim import StepGrid, invert, sample
from .denoiser import GuidanceConfig, Model, make_adapters
from .mix import make_mask, mix_noise
from .sched import NoiseSchedule, sd_schedule, snr_curve
from .select import ScoredSample, select_items
from .toyworld import Sample, ToyConfig, World, content_score, draw_batch, make_world, nearest_style, style_score
from .train import REFINE_DEFAULTS, RefineSet, TrainConfig, pretrain, refine

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "instastyle-manifest"
REPORT_HEADER = (
    "run_id", "stage", "content_id", "style_id_prompted",
    "style_mass_ref", "content_mass_prompted", "style_argmax", "content_argmax",
)
SWEEP_KINDS = ("snr-curve", "guidance", "timestep", "mixgrid")
GUIDANCE_GRID = (1.5, 2.5, 3.5, 4.5, 5.5, 6.5)
MIX_GRID = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
TIMESTEP_GRID = (200, 400, 600, 800, 1000)

# stream labels under Rng(cfg.seed)
_PRETRAIN, _REFERENCES, _FRESH, _ADAPTERS, _REFINE, _MASK, _SECOND = range(1, 8)


@dataclass(frozen=True)
class PipelineConfig:
    world: ToyConfig = field(default_factory=ToyConfig)
    sched_T: int = 1000
    steps: int = 50
    w: float = 2.5
    w_inv: float = 1.0
    m_initial: int = 15
    n_selected: int = 5
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    refine: TrainConfig = REFINE_DEFAULTS
    mix_alpha: float = 0.5
    mix_beta: float = 0.5
    seed: int = 0
    lora_rank: int = 4
    reference_style: int = 2
    second_style: int = 0
    n_references: int = 25
    mix_masks: int = 5

    def validate(self) -> "PipelineConfig":
        self.world.validate()
        self.pretrain.validate()
        self.refine.validate()
        if self.sched_T < 2 or not 1 <= self.steps <= self.sched_T:
            raise InvalidArgument("need sched_T >= 2 and 1 <= steps <= sched_T")
        if self.w < 0 or self.w_inv < 0:
            raise InvalidArgument("guidance scales must be non-negative")
        if not 1 <= self.n_selected <= self.m_initial:
            raise InvalidArgument("need 1 <= n_selected <= m_initial")
        if not (0 <= self.mix_alpha <= 1 and 0 <= self.mix_beta <= 1):
            raise InvalidArgument("mix_alpha and mix_beta must lie in [0, 1]")
        for name in ("reference_style", "second_style"):
            if not 0 <= getattr(self, name) < self.world.n_style:
                raise InvalidArgument(f"{name} out of range")
        if self.reference_style == self.second_style:
            raise InvalidArgument("second_style must differ from reference_style")
        if self.n_references < 1 or self.mix_masks < 1:
            raise InvalidArgument("n_references and mix_masks must be positive")
        return self

    @property
    def held_out(self) -> tuple[int, ...]:
        return (self.reference_style,)

    @property
    def seen(self) -> list[int]:
        return [s for s in range(self.world.n_style) if s not in self.held_out]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        nested = {"world": ToyConfig, "pretrain": TrainConfig, "refine": TrainConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidArgument(f"unknown config fields: {sorted(unknown)}")
        kw = {}
        base = cls()
        for name, value in doc.items():
            if name in nested:
                sub_known = {f.name for f in fields(nested[name])}
                if not isinstance(value, dict) or set(value) - sub_known:
                    raise InvalidArgument(f"bad {name} block: {value!r}")
                kw[name] = replace(getattr(base, name), **value)
            else:
                kw[name] = value
        try:
            return replace(base, **kw).validate()
        except TypeError as exc:
            raise InvalidArgument(str(exc)) from exc


@dataclass(eq=False)
class Context:
    """Objects every stage derives from a config."""

    cfg: PipelineConfig
    world: World
    sched: NoiseSchedule
    grid: StepGrid

    @classmethod
    def build(cls, cfg: PipelineConfig) -> "Context":
        cfg.validate()
        return cls(cfg, make_world(cfg.world), sd_schedule(cfg.sched_T), StepGrid.uniform(cfg.sched_T, cfg.steps))

    @property
    def root(self) -> Rng:
        return Rng(self.cfg.seed)

    def guidance(self, w: float | None = None, beta: float = 0.0) -> GuidanceConfig:
        return GuidanceConfig(w=self.cfg.w if w is None else w, beta=beta)


def latent_sha256(z) -> str:
    return hashlib.sha256(np.ascontiguousarray(z, dtype="<f8").tobytes()).hexdigest()


def pretrain_model(ctx: Context, history: list | None = None) -> Model:
    """Backbone plus two learnable style tokens (one per combinable reference)."""
    return pretrain(ctx.world, ctx.sched, ctx.cfg.pretrain, split(ctx.root, _PRETRAIN),
                    held_out=ctx.cfg.held_out, n_learned=2, history=history)


def draw_references(ctx: Context, n: int, style: int | None = None, stream: int = _REFERENCES) -> list[Sample]:
    """``n`` references of one style; contents cycle through the content ids."""
    style = ctx.cfg.reference_style if style is None else style
    c = np.arange(n) % ctx.cfg.world.n_content
    X = draw_batch(ctx.world, c, np.full(n, style), split(ctx.root, stream))
    return [Sample(x=X[i], content_id=int(c[i]), style_id=style) for i in range(n)]


def cycled_contents(ctx: Context, n: int) -> np.ndarray:
    return np.arange(n) % ctx.cfg.world.n_content


def init_token(ctx: Context, model: Model, reference: Sample, token: int = 0) -> tuple[Model, int]:
    """Copy of ``model`` whose learned token ``token`` starts at the nearest seen style's embedding.

    The table is copied; weights and adapters are shared.
    """
    source = nearest_style(ctx.world, reference.x, ctx.cfg.seen)
    vocab = model.table.vocab
    table = model.table.copy()
    table.embeddings[vocab.learned(token)] = table.embeddings[vocab.style(source)]
    return Model(model.params, table, model.adapters), source


def invert_reference(ctx: Context, model: Model, reference: Sample, token: int = 0) -> np.ndarray:
    L = model.table.vocab.learned(token)
    return invert(model, ctx.sched, ctx.grid, reference.x, model.prompt(reference.content_id, L), ctx.cfg.w_inv)


def generate_from(ctx: Context, model: Model, z_T, contents, token: int = 0, w: float | None = None,
                  grid: StepGrid | None = None) -> np.ndarray:
    """One generation per content from ``z_T`` (a latent shared by all, or one row per content)."""
    contents = np.atleast_1d(np.asarray(contents, dtype=int))
    z = np.asarray(z_T, dtype=np.float64)
    if z.ndim == 1:
        z = np.tile(z, (contents.size, 1))
    P = model.prompts(contents, model.table.vocab.learned(token))
    return sample(model, ctx.sched, grid or ctx.grid, z, P, ctx.guidance(w))


def score(ctx: Context, X, contents, ref_style: int) -> dict[str, np.ndarray]:
    X = np.atleast_2d(as_latent(X, ctx.world.dim, name="generations"))
    contents = np.asarray(contents, dtype=int)
    ss, cs = style_score(ctx.world, X), content_score(ctx.world, X)
    return {
        "style_mass_ref": ss[:, ref_style],
        "content_mass_prompted": cs[np.arange(len(X)), contents],
        "style_argmax": ss.argmax(axis=1),
        "content_argmax": cs.argmax(axis=1),
    }


@dataclass(eq=False)
class Stage1Result:
    model: Model  # shares weights with the input; learned token initialised
    z_T: np.ndarray
    generations: np.ndarray
    contents: np.ndarray
    manifest: dict


def stage1(ctx: Context, model: Model, reference: Sample, contents=None, token: int = 0) -> Stage1Result:
    """Invert the reference once and sample the prompt set from that single noise."""
    contents = cycled_contents(ctx, ctx.cfg.m_initial) if contents is None else np.asarray(contents, dtype=int)
    ready, source = init_token(ctx, model, reference, token)
    z_T = invert_reference(ctx, ready, reference, token)
    X = generate_from(ctx, ready, z_T, contents, token)
    sc = score(ctx, X, contents, reference.style_id)
    z_hash = latent_sha256(z_T)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "checkpoint_sha256": checkpoint.digest(model),
        "token": token,
        "token_init_style": source,
        "reference": {"x": reference.x.tolist(), "content_id": reference.content_id, "style_id": reference.style_id},
        "z_T": z_T.tolist(),
        "z_T_sha256": z_hash,
        "items": [
            {"index": i, "content_id": int(contents[i]), "x": X[i].tolist(),
             "style_s": float(sc["style_mass_ref"][i]), "content_s": float(sc["content_mass_prompted"][i]),
             "z_T_sha256": z_hash}
            for i in range(len(contents))
        ],
    }
    return Stage1Result(ready, z_T, X, contents, manifest)


def manifest_items(manifest: dict) -> list[ScoredSample]:
    try:
        return [ScoredSample(np.asarray(it["x"], dtype=np.float64), int(it["content_id"]),
                             float(it["style_s"]), float(it["content_s"])) for it in manifest["items"]]
    except (KeyError, TypeError) as exc:
        raise InvalidArgument(f"malformed manifest: {exc}") from exc


def _check_manifest(manifest: dict, model_hash: str) -> None:
    if manifest.get("format") != MANIFEST_FORMAT or manifest.get("version") != 1:
        raise InvalidArgument("not an instastyle-manifest v1 document")
    if manifest.get("checkpoint_sha256") != model_hash:
        raise InvalidArgument("manifest was produced by a different checkpoint")


def stage2(ctx: Context, model: Model, manifests, keep=(), rng: Rng | None = None,
           history: list | None = None) -> tuple[Model, list[list[int]]]:
    """Select from each manifest and jointly refine the learned token(s) and adapters.

    ``model`` is the checkpoint the manifests were produced from. ``keep``
    forces indices into the first manifest's selection. Returns the refined
    model and the selected indices per manifest.
    """
    if isinstance(manifests, dict):
        manifests = [manifests]
    h = checkpoint.digest(model)
    vocab = model.table.vocab
    table = model.table.copy()
    X, ids, chosen = [], [], []
    for i, man in enumerate(manifests):
        _check_manifest(man, h)
        items = manifest_items(man)
        sel = select_items(items, ctx.cfg.n_selected, keep if i == 0 else ())
        L = vocab.learned(int(man["token"]))
        table.embeddings[L] = table.embeddings[vocab.style(int(man["token_init_style"]))]
        X += [items[j].x for j in sel]
        ids += [(items[j].content_id, L) for j in sel]
        chosen.append(sel)
    rng = rng if rng is not None else split(ctx.root, _REFINE)
    ready = Model(model.params, table, make_adapters(split(rng, _ADAPTERS), ctx.cfg.lora_rank))
    refined = refine(ready, RefineSet(np.stack(X), np.array(ids)), ctx.sched, ctx.cfg.refine, split(rng, _REFINE), history)
    return refined, chosen


def generate_final(ctx: Context, model: Model, reference: Sample, contents, token: int = 0) -> tuple[np.ndarray, dict]:
    """Re-invert the reference with the refined state and sample each content."""
    z_T = invert_reference(ctx, model, reference, token)
    X = generate_from(ctx, model, z_T, contents, token)
    return X, score(ctx, X, contents, reference.style_id)


def combine_styles(ctx: Context, model: Model, ref1: Sample, ref2: Sample, contents,
                   alpha: float | None = None, beta: float | None = None, mask_rng: Rng | None = None
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Mix the two references' inversion noises and sample under composed guidance.

    Token 0 carries ``ref1``'s style, token 1 ``ref2``'s. Returns the
    generations and their full style-score rows.
    """
    alpha = ctx.cfg.mix_alpha if alpha is None else alpha
    beta = ctx.cfg.mix_beta if beta is None else beta
    contents = np.atleast_1d(np.asarray(contents, dtype=int))
    z1 = invert_reference(ctx, model, ref1, 0)
    z2 = invert_reference(ctx, model, ref2, 1)
    m = make_mask(ctx.world.dim, alpha, mask_rng if mask_rng is not None else split(ctx.root, _MASK))
    z = np.tile(mix_noise(z1, z2, m), (contents.size, 1))
    vocab = model.table.vocab
    P1 = model.prompts(contents, vocab.learned(0))
    P2 = model.prompts(contents, vocab.learned(1))
    X = sample(model, ctx.sched, ctx.grid, z, P1, ctx.guidance(beta=beta), prompt2=P2)
    return X, style_score(ctx.world, X)


def refine_pair(ctx: Context, model: Model, ref1: Sample, ref2: Sample) -> Model:
    """Stage 1 on both references, then one joint refinement of both tokens."""
    m1 = stage1(ctx, model, ref1, token=0).manifest
    m2 = stage1(ctx, model, ref2, token=1).manifest
    refined, _ = stage2(ctx, model, [m1, m2], rng=split(ctx.root, _SECOND))
    return refined


@dataclass
class RunReport:
    run_id: str
    rows: list[tuple] = field(default_factory=list)

    def add(self, stage: str, contents, style_prompted: int, scores: dict) -> None:
        contents = np.atleast_1d(np.asarray(contents, dtype=int))
        for i, c in enumerate(contents):
            self.rows.append((
                self.run_id, stage, int(c), int(style_prompted),
                float(scores["style_mass_ref"][i]), float(scores["content_mass_prompted"][i]),
                int(scores["style_argmax"][i]), int(scores["content_argmax"][i]),
            ))

    def __len__(self) -> int:
        return len(self.rows)

    def stages(self) -> list[str]:
        return list(dict.fromkeys(r[1] for r in self.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerows(self.rows)
        return buf.getvalue()

    def summary(self) -> dict:
        out = {}
        for stage in self.stages():
            rows = [r for r in self.rows if r[1] == stage]
            out[stage] = {
                "n": len(rows),
                "style_mass_ref_mean": float(np.mean([r[4] for r in rows])),
                "content_mass_prompted_mean": float(np.mean([r[5] for r in rows])),
                "style_accuracy": float(np.mean([r[6] == r[3] for r in rows])),
                "content_accuracy": float(np.mean([r[7] == r[2] for r in rows])),
            }
        return {"run_id": self.run_id, "stages": out}

    def write(self, out_dir, name: str = "report") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{name}.csv").write_text(self.to_csv())
        (out_dir / f"{name}_summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def run_id(cfg: PipelineConfig) -> str:
    return f"seed{cfg.seed}"


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))


def evaluate_stage1(ctx: Context, model: Model, references, report: RunReport) -> list[Stage1Result]:
    """Stage 1 per reference, plus a fresh-noise control at the same prompts.

    Each reference contributes one row per content id to the ``stage1`` and
    ``fresh`` stages; fresh noise for reference ``r`` comes from its own stream.
    """
    contents = np.arange(ctx.cfg.world.n_content)
    fresh_root = split(ctx.root, _FRESH)
    results = []
    for r, ref in enumerate(references):
        res = stage1(ctx, model, ref)
        X = generate_from(ctx, res.model, res.z_T, contents)
        report.add("stage1", contents, ref.style_id, score(ctx, X, contents, ref.style_id))
        z = gaussian(split(fresh_root, r), ctx.world.dim, contents.size)
        Xf = generate_from(ctx, res.model, z, contents)
        report.add("fresh", contents, ref.style_id, score(ctx, Xf, contents, ref.style_id))
        results.append(res)
    return results


def run(cfg: PipelineConfig, out_dir=None, model: Model | None = None) -> RunReport:
    """Full two-stage procedure over ``cfg.n_references`` held-out-style references.

    Writes the pretrained and refined checkpoints, one manifest per reference,
    ``report.csv`` and ``report_summary.json`` when ``out_dir`` is given.
    """
    ctx = Context.build(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = pretrain_model(ctx)
    if out is not None:
        checkpoint.save(model, out / "pretrain.ckpt.json")
    report = RunReport(run_id(cfg))
    refs = draw_references(ctx, cfg.n_references)
    results = evaluate_stage1(ctx, model, refs, report)
    contents = np.arange(cfg.world.n_content)
    refine_root = split(ctx.root, _REFINE)
    for r, (ref, res) in enumerate(zip(refs, results)):
        refined, _ = stage2(ctx, model, res.manifest, rng=split(refine_root, r))
        _, sc = generate_final(ctx, refined, ref, contents)
        report.add("stage2", contents, ref.style_id, sc)
        if out is not None:
            _dump(out / f"manifest_{r:03d}.json", res.manifest)
            checkpoint.save(refined, out / f"refined_{r:03d}.ckpt.json")
        log.info("reference %d refined", r)
    if out is not None:
        report.write(out)
    return report


def sweep(cfg: PipelineConfig, kind: str, model: Model | None = None):
    """Experiment table for ``kind``; returns a :class:`RunReport`, or rows of (t, snr) for ``snr-curve``."""
    if kind not in SWEEP_KINDS:
        raise InvalidArgument(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")
    cfg.validate()
    if kind == "snr-curve":
        curve = snr_curve(sd_schedule(cfg.sched_T))
        return [(t, float(v)) for t, v in zip(range(1, cfg.sched_T + 1), curve)]
    ctx = Context.build(cfg)
    model = pretrain_model(ctx) if model is None else model
    report = RunReport(run_id(cfg))
    contents = np.arange(cfg.world.n_content)
    if kind == "mixgrid":
        ref1 = draw_references(ctx, 1, cfg.second_style, stream=_SECOND)[0]
        ref2 = draw_references(ctx, 1)[0]
        pair = refine_pair(ctx, model, ref1, ref2)
        for a in MIX_GRID:
            for b in MIX_GRID:
                for k in range(cfg.mix_masks):
                    X, _ = combine_styles(ctx, pair, ref1, ref2, contents, a, b, split(split(ctx.root, _MASK), k))
                    report.add(f"alpha={a},beta={b}", contents, ref2.style_id, score(ctx, X, contents, ref2.style_id))
        return report
    for ref in draw_references(ctx, cfg.n_references):
        ready, _ = init_token(ctx, model, ref)
        if kind == "guidance":
            z_T = invert_reference(ctx, ready, ref)
            for w in GUIDANCE_GRID:
                X = generate_from(ctx, ready, z_T, contents, w=w)
                report.add(f"w={w}", contents, ref.style_id, score(ctx, X, contents, ref.style_id))
        else:
            for T_stop in TIMESTEP_GRID:
                grid = StepGrid(tuple(t for t in ctx.grid.timesteps if t <= T_stop))
                z = invert(ready, ctx.sched, grid, ref.x, ready.prompt(ref.content_id, ready.table.vocab.learned(0)),
                           cfg.w_inv)
                X = generate_from(ctx, ready, z, contents, grid=grid)
                report.add(f"T={T_stop}", contents, ref.style_id, score(ctx, X, contents, ref.style_id))
    return report
