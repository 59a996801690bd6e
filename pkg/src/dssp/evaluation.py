"""Closed-loop evaluation, perturbation robustness, encoding-cost
benchmarks, and the ablation matrix.

The control loop is receding-horizon: every observation is encoded and
pushed through the streaming history state, and a fresh action chunk is
sampled whenever the execution queue runs dry.  Observation-noise
robustness perturbs the newest recent state tokens with scaled Gaussian
noise at condition-build time; by default only the condition slots see
the noise while the history cache stays clean (a flag selects the harsher
reading where the cache is poisoned too).
"""

from __future__ import annotations

import gc
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import attention, autodiff as ad
from . import diffusion, encoders, model, training
from .config import TrainConfig, config_digest
from .envs import Env, Trajectory, descriptor_for, make_env
from .model import PolicyModel
from .numcore import DsspError, ParamStore, init_params


@dataclass
class EvalReport:
    env: str
    episodes: int
    successes: int
    mean_episode_length: float
    base_seed: int
    sigma: float
    config_digest: str

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes


@dataclass
class BenchRow:
    encoder: str          # "ssm" | "attention"
    mode: str             # "streaming" | "recompute"
    history_length: int
    p95_latency_ms: float
    peak_memory_bytes: int
    iterations: int


class DsspPolicy:
    """Streaming controller around a trained parameter store."""

    def __init__(self, params: ParamStore, cfg: TrainConfig, sigma: float = 0.0,
                 perturb_history: bool = False):
        self.m = model.bind_model(params, cfg, descriptor_for(cfg.env))
        self.cfg = cfg
        self.sigma = sigma
        self.perturb_history = perturb_history
        self.sched = diffusion.build_schedule(L=cfg.L, inference_steps=cfg.inference_steps)
        self.reset(np.random.Generator(np.random.PCG64(0)))

    def reset(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.recent: list[np.ndarray] = []
        self.state = encoders.fresh_state(self.m.hist, self.m.dtype) if self.m.has_history else None
        self.context: np.ndarray | None = None
        self.queue: list[np.ndarray] = []

    def observe(self, obs: np.ndarray) -> None:
        with ad.no_grad():
            z = encoders.encode_observation(self.m.obs, obs).data
        if self.sigma > 0 and self.perturb_history:
            z = z + self.sigma * self.rng.standard_normal(z.shape)
        self.recent.append(z)
        if len(self.recent) > self.cfg.N:
            self.recent.pop(0)
        if self.m.has_history:
            with ad.no_grad():
                c, self.state = encoders.encode_history_step(
                    self.m.hist, ad.constant(z), self.state)
            self.context = c.data

    def act(self, obs: np.ndarray, env: Env | None = None) -> np.ndarray:
        self.observe(obs)
        if not self.queue:
            recent = [r.copy() for r in self.recent]
            if self.sigma > 0 and not self.perturb_history:
                k = min(3, self.cfg.N, len(recent))
                for i in range(len(recent) - k, len(recent)):
                    recent[i] = recent[i] + self.sigma * self.rng.standard_normal(recent[i].shape)
            cond = model.condition_from_stream(self.m, self.context, recent)
            chunk = diffusion.sample_action_chunk(
                self.m.den, cond, self.sched, self.rng,
                self.cfg.H, self.m.desc.action_dim)
            lo = self.m.exec_offset
            self.queue = [chunk[i] for i in range(lo, lo + self.m.exec_count)]
        return self.queue.pop(0)


class ExpertPolicy:
    """Privileged wrapper: replays the scripted expert as a 'policy'."""

    def reset(self, rng) -> None:
        pass

    def act(self, obs: np.ndarray, env: Env) -> np.ndarray:
        return env.expert_action()


def episode_rng(base_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([base_seed, index, 0xE7A1])))


def rollout_policy(policy, env: Env, seed: int, sigma: float = 0.0) -> tuple[Trajectory, bool]:
    """One closed-loop episode; fully determined by (policy, env, seed)."""
    if sigma < 0:
        raise DsspError("perturbation scale must be non-negative")
    if isinstance(policy, DsspPolicy):
        policy.sigma = sigma
    policy.reset(episode_rng(seed, 0))
    obs = env.reset(seed)
    observations = [obs.copy()]
    actions = []
    done = False
    success = False
    while not done:
        a = np.asarray(policy.act(obs, env), dtype=np.float64)
        obs, done, success = env.step(a)
        observations.append(obs.copy())
        actions.append(a)
    traj = Trajectory(observations=np.stack(observations), actions=np.stack(actions),
                      success=success, env_name=env.descriptor.name, seed=seed)
    return traj, success


def evaluate(policy, env_name: str, episodes: int, base_seed: int = 0,
             sigma: float = 0.0, digest: str = "") -> EvalReport:
    """Success rate over consecutive seeds base_seed..base_seed+episodes-1."""
    if episodes < 1:
        raise DsspError("need at least one episode")
    env, _ = make_env(env_name, base_seed)
    successes = 0
    lengths = []
    for i in range(episodes):
        seed = base_seed + i
        traj, ok = rollout_policy(policy, env, seed, sigma)
        successes += ok
        lengths.append(traj.length)
    return EvalReport(env=env_name, episodes=episodes, successes=successes,
                      mean_episode_length=float(np.mean(lengths)),
                      base_seed=base_seed, sigma=sigma, config_digest=digest)


class _LockstepController:
    """Policy math for many episodes advanced in lockstep.

    All episodes resample their chunks on the same ticks, so the encoder,
    history state, and denoiser run batched over the episode axis; each
    episode keeps its own rng stream, so its noise draws do not depend on
    which other episodes share the batch.
    """

    def __init__(self, params: ParamStore, cfg: TrainConfig, n: int, base_seed: int,
                 sigma: float, perturb_history: bool):
        from . import ssm

        self.m = model.bind_model(params, cfg, descriptor_for(cfg.env))
        self.cfg = cfg
        self.n = n
        self.sigma = sigma
        self.perturb_history = perturb_history
        self.sched = diffusion.build_schedule(L=cfg.L, inference_steps=cfg.inference_steps)
        self.rngs = [episode_rng(base_seed + i, 0) for i in range(n)]
        self.recent: list[np.ndarray] = []   # each [n, d_model], newest last
        self.caches = None
        if self.m.has_history:
            dt = self.m.dtype
            self.caches = [ssm.SSMCache(np.zeros((n, cfg.d_inner, cfg.d_state), dtype=dt), 0)
                           for _ in self.m.hist.blocks]
        self.context: np.ndarray | None = None

    def observe(self, obs_batch: np.ndarray, active: np.ndarray) -> None:
        from . import ssm

        with ad.no_grad():
            z = encoders.encode_observations(
                self.m.obs, ad.constant(obs_batch.astype(self.m.dtype))).data
        if self.sigma > 0 and self.perturb_history:
            noise = np.zeros_like(z)
            for i in range(self.n):
                if active[i]:
                    noise[i] = self.rngs[i].standard_normal(z.shape[-1])
            z = z + self.sigma * noise
        self.recent.append(z)
        if len(self.recent) > self.cfg.N:
            self.recent.pop(0)
        if self.m.has_history:
            h = ad.constant(z[:, None, :])
            with ad.no_grad():
                for block, cache in zip(self.m.hist.blocks, self.caches):
                    h, new_cache = ssm.mamba_block(block, h, cache)
                    cache.state = new_cache.state
                    cache.step_count = new_cache.step_count
                h = ad.layer_norm(h, self.m.hist.norm_g, self.m.hist.norm_b)
            self.context = h.data[:, 0, :]

    def _conditions(self, active: np.ndarray) -> np.ndarray:
        rows = []
        if self.m.has_history:
            rows.append(self.context)
        if self.cfg.variant != "no_recent":
            recent = [r.copy() for r in self.recent]
            if self.sigma > 0 and not self.perturb_history:
                k = min(3, self.cfg.N, len(recent))
                for j in range(len(recent) - k, len(recent)):
                    for i in range(self.n):
                        if active[i]:
                            recent[j][i] += self.sigma * self.rngs[i].standard_normal(
                                recent[j].shape[-1])
            pad = [recent[0]] * (self.cfg.N - len(recent))
            rows.extend(pad + recent)
        return np.stack(rows, axis=1)  # [n, n_prefix, d]

    def sample_chunks(self, active: np.ndarray) -> np.ndarray:
        """One batched denoising pass; returns executable rows [n, count, da]."""
        cond = ad.constant(self._conditions(active).astype(self.m.dtype))
        da = self.m.desc.action_dim
        x = np.zeros((self.n, self.cfg.H, da))
        for i in range(self.n):
            if active[i]:
                x[i] = self.rngs[i].standard_normal((self.cfg.H, da))
        subset = self.sched.inference_timestep_subset
        with ad.no_grad():
            for idx, tau in enumerate(subset):
                x0_hat = diffusion.denoise(self.m.den, ad.constant(x.astype(self.m.dtype)),
                                           int(tau), cond).data.astype(np.float64)
                ab = self.sched.alpha_bar[tau]
                next_ab = (self.sched.alpha_bar[subset[idx + 1]]
                           if idx + 1 < len(subset) else 1.0)
                if next_ab >= 1.0:
                    x = np.array(x0_hat)
                else:
                    eps_hat = (x - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
                    x = np.sqrt(next_ab) * x0_hat + np.sqrt(1.0 - next_ab) * eps_hat
        lo = self.m.exec_offset
        return x[:, lo:lo + self.m.exec_count, :]


def evaluate_params(params: ParamStore, cfg: TrainConfig, episodes: int,
                    base_seed: int = 0, sigma: float = 0.0,
                    perturb_history: bool = False) -> EvalReport:
    """Batched lockstep evaluation over consecutive seeds."""
    if episodes < 1:
        raise DsspError("need at least one episode")
    if sigma < 0:
        raise DsspError("perturbation scale must be non-negative")
    env_list = []
    obs_rows = []
    for i in range(episodes):
        env, _ = make_env(cfg.env, base_seed + i)
        env_list.append(env)
        obs_rows.append(env.reset(base_seed + i))
    obs = np.stack(obs_rows)
    ctrl = _LockstepController(params, cfg, episodes, base_seed, sigma, perturb_history)

    active = np.ones(episodes, dtype=bool)
    success = np.zeros(episodes, dtype=bool)
    lengths = np.zeros(episodes, dtype=int)
    queue: np.ndarray | None = None
    queue_pos = 0
    while active.any():
        ctrl.observe(obs, active)
        if queue is None or queue_pos >= queue.shape[1]:
            queue = ctrl.sample_chunks(active)
            queue_pos = 0
        for i in range(episodes):
            if not active[i]:
                continue
            o, done, ok = env_list[i].step(queue[i, queue_pos])
            obs[i] = o
            lengths[i] += 1
            if done:
                active[i] = False
                success[i] = ok
        queue_pos += 1
    return EvalReport(env=cfg.env, episodes=episodes, successes=int(success.sum()),
                      mean_episode_length=float(lengths.mean()), base_seed=base_seed,
                      sigma=sigma, config_digest=config_digest(cfg))


# -- encoding cost benchmark ------------------------------------------------------


def _attention_encoder_store(cfg: TrainConfig, seed: int = 0):
    """Attention reference encoder sized to the scan encoder within 10%."""
    d, di, ds = cfg.d_model, cfg.d_inner, cfg.d_state
    d_ff = attention.matched_ff_width(d, di, ds)
    specs = []
    for i in range(cfg.encoder_layers):
        specs += attention.attention_block_specs(f"attn.block{i}", d, d_ff)
    store = init_params(specs, seed)
    blocks = [attention.bind_attention_block(store, f"attn.block{i}", d)
              for i in range(cfg.encoder_layers)]
    return store, blocks


def attention_encoder_param_gap(cfg: TrainConfig) -> float:
    """Relative parameter-count mismatch between the two encoders."""
    scan_specs = encoders.history_encoder_specs("h", cfg.d_model, cfg.d_inner,
                                                cfg.d_state, cfg.encoder_layers)
    scan_n = sum(int(np.prod(s.shape)) for s in scan_specs)
    attn_store, _ = _attention_encoder_store(cfg)
    attn_n = attn_store.num_scalars()
    return abs(attn_n - scan_n) / scan_n


def _percentile_ms(samples: list[float], q: float = 95.0) -> float:
    return float(np.percentile(np.asarray(samples), q) * 1e3)


def bench_encoding(params: ParamStore, cfg: TrainConfig, lengths: list[int],
                   mode: str = "streaming", encoder: str = "ssm",
                   iterations: int = 200, token_seed: int = 0) -> list[BenchRow]:
    """Per-step cost of producing the context token after T_h consumed tokens.

    streaming (scan only) advances a hidden-state cache by one token per
    iteration; recompute re-encodes the whole prefix every iteration.
    Latency is wall clock of the encoding call alone; memory is the peak
    transient allocation of one call, measured in a separate pass so the
    tracer does not pollute the timings.
    """
    if sorted(lengths) != list(lengths):
        raise DsspError("lengths must be sorted ascending")
    if mode not in ("streaming", "recompute"):
        raise DsspError(f"unknown mode '{mode}'")
    if encoder not in ("ssm", "attention"):
        raise DsspError(f"unknown encoder '{encoder}'")
    if encoder == "attention" and mode == "streaming":
        raise DsspError("the attention reference has no streaming mode")

    d = cfg.d_model
    if encoder == "ssm":
        m = model.bind_model(params, cfg, descriptor_for(cfg.env))
        if not m.has_history:
            raise DsspError("checkpoint has no history encoder")
        hist = m.hist
    else:
        _, attn_blocks = _attention_encoder_store(cfg, seed=token_seed)

    rng = np.random.Generator(np.random.PCG64(token_seed))
    rows = []
    for T_h in lengths:
        tokens = rng.standard_normal((T_h + iterations, d))

        if encoder == "ssm" and mode == "streaming":
            def setup():
                state = encoders.fresh_state(hist)
                with ad.no_grad():
                    for t in range(T_h):
                        _, state = encoders.encode_history_step(
                            hist, ad.constant(tokens[t]), state)
                return state

            state = setup()

            def encode_step(i, state=state):
                with ad.no_grad():
                    c, new_state = encoders.encode_history_step(
                        hist, ad.constant(tokens[T_h + i]), state)
                state.caches = new_state.caches
                return c.data
        elif encoder == "ssm":
            def encode_step(i):
                with ad.no_grad():
                    c, _ = encoders.encode_history_full(
                        hist, ad.constant(tokens[:T_h]))
                return c.data
        else:
            def encode_step(i):
                with ad.no_grad():
                    h = ad.constant(tokens[:T_h])
                    for blk in attn_blocks:
                        h = attention.attention_block(blk, h)
                return h.data[-1]

        c = encode_step(0)  # warm caches/compile paths; also shape audit
        if c.shape != (d,):
            raise DsspError(f"context token shape {c.shape} != ({d},)")

        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            samples = []
            for i in range(1, iterations + 1):
                t0 = time.perf_counter()
                encode_step(i % iterations)
                samples.append(time.perf_counter() - t0)
        finally:
            if gc_was_enabled:
                gc.enable()

        tracemalloc.start()
        tracemalloc.reset_peak()
        encode_step(0)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()

        rows.append(BenchRow(encoder=encoder, mode=mode, history_length=T_h,
                             p95_latency_ms=_percentile_ms(samples),
                             peak_memory_bytes=int(peak), iterations=iterations))
    return rows


# -- ablation matrix ---------------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_hist", "no_td", "no_recent", "no_dyn", "attn_denoiser")


@dataclass
class AblationRow:
    variant: str
    success_rate: float
    episodes: int
    final_l_diff: float
    final_l_dyn: float


def run_ablation(base_cfg: TrainConfig, variants: list[str], demos: list,
                 episodes: int = 100, eval_seed: int = 10_000) -> list[AblationRow]:
    """Train and evaluate each variant under identical budgets and seeds."""
    rows = []
    for variant in variants:
        if variant not in ABLATION_VARIANTS:
            raise DsspError(f"unknown ablation variant '{variant}'")
        cfg = TrainConfig(**{**base_cfg.__dict__, "variant": variant})
        result = training.train(cfg, demos=demos)
        report = evaluate_params(result.params, cfg, episodes, base_seed=eval_seed)
        rows.append(AblationRow(variant=variant, success_rate=report.success_rate,
                                episodes=episodes, final_l_diff=result.logs[-1].l_diff,
                                final_l_dyn=result.logs[-1].l_dyn))
    return rows


# -- CSV emission -------------------------------------------------------------------

def eval_report_csv(reports: list[EvalReport]) -> str:
    lines = ["env,episodes,successes,success_rate,mean_episode_length,base_seed,sigma"]
    digest = ""
    for r in reports:
        lines.append(f"{r.env},{r.episodes},{r.successes},{r.success_rate:.6f},"
                     f"{r.mean_episode_length:.3f},{r.base_seed},{r.sigma}")
        digest = r.config_digest or digest
    if digest:
        lines.append(f"# config_digest={digest}")
    return "\n".join(lines) + "\n"


def bench_rows_csv(rows: list[BenchRow], digest: str = "") -> str:
    lines = ["encoder,mode,history_length,p95_latency_ms,peak_memory_bytes,iterations"]
    for r in rows:
        lines.append(f"{r.encoder},{r.mode},{r.history_length},"
                     f"{r.p95_latency_ms:.6f},{r.peak_memory_bytes},{r.iterations}")
    if digest:
        lines.append(f"# config_digest={digest}")
    return "\n".join(lines) + "\n"


def ablation_rows_csv(rows: list[AblationRow], digest: str = "") -> str:
    lines = ["variant,success_rate,episodes,final_l_diff,final_l_dyn"]
    for r in rows:
        lines.append(f"{r.variant},{r.success_rate:.6f},{r.episodes},"
                     f"{r.final_l_diff:.6f},{r.final_l_dyn:.6f}")
    if digest:
        lines.append(f"# config_digest={digest}")
    return "\n".join(lines) + "\n"
