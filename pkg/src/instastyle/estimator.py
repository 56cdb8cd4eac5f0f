"""scikit-learn style wrappers around the backbone and the two-stage procedure."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import InvalidArgument, Rng, gaussian
from .ddim import StepGrid, sample
from .denoiser import GuidanceConfig, Model, Vocab
from .pipeline import Context, PipelineConfig, generate_final, invert_reference, stage1, stage2
from .sched import sd_schedule
from .toyworld import Sample, ToyConfig
from .train import TrainConfig, array_sampler, fit_backbone


class DiffusionPrior(BaseEstimator):
    """Conditional noise predictor fitted on labelled latents.

    ``fit(X, y)`` takes latents ``X`` (n, D) and integer labels ``y`` (n, 2)
    holding the content id and the style token to caption each row with.
    """

    def __init__(self, n_content=4, n_style=3, n_learned=2, sched_T=1000, iters=20_000, lr=1e-3, batch=128,
                 p_uncond=0.1, random_state=0):
        self.n_content = n_content
        self.n_style = n_style
        self.n_learned = n_learned
        self.sched_T = sched_T
        self.iters = iters
        self.lr = lr
        self.batch = batch
        self.p_uncond = p_uncond
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=None, ensure_2d=True).astype(int)
        if y.shape != (X.shape[0], 2):
            raise InvalidArgument(f"y must have shape ({X.shape[0]}, 2), got {y.shape}")
        if np.any((y[:, 0] < 0) | (y[:, 0] >= self.n_content)) or np.any((y[:, 1] < 0) | (y[:, 1] >= self.n_style)):
            raise InvalidArgument("labels out of range")
        vocab = Vocab(self.n_content, self.n_style, self.n_learned)
        ids = np.stack([y[:, 0], vocab.n_content + y[:, 1]], axis=1)
        cfg = TrainConfig(iters=self.iters, lr=self.lr, batch=self.batch, p_uncond=self.p_uncond)
        self.loss_history_ = []
        self.model_ = fit_backbone(X.shape[1], vocab, sd_schedule(self.sched_T), array_sampler(X, ids), cfg,
                                   Rng(self.random_state), self.loss_history_)
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, contents, styles, steps=50, w=2.5, random_state=None):
        """One generation per (content, style) pair from fresh Gaussian noise."""
        check_is_fitted(self, "model_")
        contents = np.atleast_1d(np.asarray(contents, dtype=int))
        styles = np.broadcast_to(np.asarray(styles, dtype=int), contents.shape)
        vocab = self.model_.table.vocab
        ids = np.stack([contents, [vocab.style(int(s)) for s in styles]], axis=1)
        rng = Rng(self.random_state if random_state is None else random_state, stream_id=1)
        z = gaussian(rng, self.n_features_in_, contents.size)
        s = sd_schedule(self.sched_T)
        return sample(self.model_, s, StepGrid.uniform(self.sched_T, steps), z,
                      self.model_.table.embeddings[ids], GuidanceConfig(w=w, beta=0.0))


class InstaStyle(BaseEstimator, TransformerMixin):
    """Learn a style from one reference latent and generate new content in it.

    ``fit(X, y)`` takes a single reference row and its content id; ``prior`` is
    a fitted :class:`DiffusionPrior` or a :class:`~instastyle.denoiser.Model`.
    ``transform`` maps latents to their inversion noise under the learned
    style, and ``predict`` generates the requested contents.
    """

    def __init__(self, prior=None, world=None, steps=50, w=2.5, w_inv=1.0, m_initial=15, n_selected=5,
                 refine_iters=500, refine_lr=1e-3, refine_batch=16, lora_rank=4, reference_style=2, random_state=0):
        self.prior = prior
        self.world = world
        self.steps = steps
        self.w = w
        self.w_inv = w_inv
        self.m_initial = m_initial
        self.n_selected = n_selected
        self.refine_iters = refine_iters
        self.refine_lr = refine_lr
        self.refine_batch = refine_batch
        self.lora_rank = lora_rank
        self.reference_style = reference_style
        self.random_state = random_state

    def _context(self, T: int) -> Context:
        cfg = PipelineConfig(
            world=self.world or ToyConfig(), sched_T=T, steps=self.steps, w=self.w, w_inv=self.w_inv,
            m_initial=self.m_initial, n_selected=self.n_selected, lora_rank=self.lora_rank,
            refine=TrainConfig(iters=self.refine_iters, lr=self.refine_lr, batch=self.refine_batch, p_uncond=0.0),
            reference_style=self.reference_style, seed=self.random_state,
        )
        return Context.build(cfg)

    def _prior_model(self) -> tuple[Model, int]:
        if isinstance(self.prior, DiffusionPrior):
            check_is_fitted(self.prior, "model_")
            return self.prior.model_, self.prior.sched_T
        if isinstance(self.prior, Model):
            return self.prior, 1000
        raise InvalidArgument("prior must be a fitted DiffusionPrior or a Model")

    def fit(self, X, y):
        X = check_array(np.atleast_2d(X), dtype=np.float64)
        y = np.atleast_1d(np.asarray(y, dtype=int))
        if X.shape[0] != 1 or y.shape != (1,):
            raise InvalidArgument("fit takes exactly one reference latent and its content id")
        model, T = self._prior_model()
        self.context_ = self._context(T)
        if X.shape[1] != self.context_.world.dim:
            raise InvalidArgument(f"reference dim {X.shape[1]} != world dim {self.context_.world.dim}")
        self.reference_ = Sample(x=X[0], content_id=int(y[0]), style_id=self.reference_style)
        res = stage1(self.context_, model, self.reference_)
        self.manifest_ = res.manifest
        self.model_, (self.selected_,) = stage2(self.context_, model, res.manifest)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, y=None):
        """Inversion noise of each row under ``(content, learned style)``; ``y`` defaults to the reference content."""
        check_is_fitted(self, "model_")
        X = check_array(np.atleast_2d(X), dtype=np.float64)
        y = np.full(X.shape[0], self.reference_.content_id) if y is None else np.atleast_1d(np.asarray(y, dtype=int))
        return np.stack([invert_reference(self.context_, self.model_, Sample(x, int(c), self.reference_style))
                         for x, c in zip(X, y)])

    def predict(self, contents):
        """Generations of ``contents`` in the learned style."""
        check_is_fitted(self, "model_")
        X, _ = generate_final(self.context_, self.model_, self.reference_, np.atleast_1d(contents))
        return X
