########################################################################################################
# GeneOH - generalizable hand-object interaction denoising
########################################################################################################

import math, logging
from dataclasses import dataclass
import torch
from tqdm import tqdm

from .utils import DTYPE, InvalidInputError, ShapeError, ConfigError, generator
from .model import HEADS, DenoiserModel, DenoisingAutoencoder

log = logging.getLogger('geneoh.diffusion')

########################################################################################################

@dataclass(frozen=True)
class NoiseSchedule:
    T_max: int
    beta_start: float
    beta_end: float
    betas: torch.Tensor           # [T_max], index t-1
    alphas: torch.Tensor
    alphas_cumprod: torch.Tensor
    sigmas: torch.Tensor

def build_linear_schedule(T_max=1000, beta_start=0.001, beta_end=0.02):
    if not (int(T_max) >= 1 and 0 < beta_start <= beta_end < 1):
        raise InvalidInputError(f'invalid schedule T_max={T_max} beta=({beta_start}, {beta_end})')
    betas = torch.linspace(beta_start, beta_end, int(T_max), dtype=DTYPE)
    alphas = 1 - betas
    return NoiseSchedule(int(T_max), float(beta_start), float(beta_end), betas, alphas,
                         torch.cumprod(alphas, 0), torch.sqrt(betas))

def _check_t(t, schedule, lo=1):
    tt = torch.as_tensor(t)
    if bool((tt < lo).any()) or bool((tt > schedule.T_max).any()):
        raise InvalidInputError(f'diffusion step {t} outside [{lo}, {schedule.T_max}]')

def _per_sample(values, t, x):
    '''Gather schedule values for scalar or per-row t and broadcast against x.'''
    v = values.to(x.dtype)[torch.as_tensor(t, dtype=torch.long) - 1]
    return v.reshape(v.shape + (1,) * (x.dim() - v.dim()))

def forward_diffuse(x, t, schedule, rng=None, noise=None):
    '''x_t = sqrt(abar_t) x + sqrt(1 - abar_t) n. t may be a scalar or one step per row of x.'''
    _check_t(t, schedule)
    if noise is None:
        noise = torch.randn(x.shape, generator=rng, dtype=x.dtype)
    ab = _per_sample(schedule.alphas_cumprod, t, x)
    return torch.sqrt(ab) * x + torch.sqrt(1 - ab) * noise

def _lead_shape(model, x):
    '''Batch shape of the inputs a model sees: rows, or [B, K] clips for temporal models.'''
    return x.shape[:-2] if getattr(model, 'temporal', False) else x.shape[:-1]

def _run(model, x, cond, *args):
    '''Calls a network on x flattened to its batch layout, casting to the network dtype.'''
    lead = _lead_shape(model, x)
    flat = x.reshape((-1,) + tuple(x.shape[len(lead):]))
    c = None if cond is None else cond.reshape(flat.shape[:-1] + (-1,))
    p = next(model.parameters(), None)
    dtype = p.dtype if p is not None else x.dtype
    with torch.no_grad():
        out = model(flat.to(dtype), *args, None if c is None else c.to(dtype))
    return out.to(x.dtype).reshape(x.shape)

def predict_noise(model, x, t, cond=None):
    '''Runs any callable(x, t[, cond]) on rows of x (clips of x for temporal networks).'''
    if isinstance(model, torch.nn.Module):
        n = math.prod(_lead_shape(model, x))
        tt = torch.full((n,), int(t), dtype=torch.long) if torch.as_tensor(t).dim() == 0 else torch.as_tensor(t).reshape(-1)
        return _run(model, x, cond, tt)
    flat = x.reshape(-1, x.shape[-1])
    tt = torch.full((flat.shape[0],), int(t), dtype=torch.long) if torch.as_tensor(t).dim() == 0 else torch.as_tensor(t).reshape(-1)
    out = model(flat, tt) if cond is None else model(flat, tt, cond.reshape(flat.shape[0], -1))
    return torch.as_tensor(out).to(x.dtype).reshape(x.shape)

def reverse_denoise_step(x_t, t, model, schedule, rng=None, noise=None, cond=None):
    '''One posterior sample x_{t-1}; the last step (t = 1) adds no noise.'''
    _check_t(t, schedule)
    t = int(t)
    alpha = schedule.alphas[t - 1].item()
    ab = schedule.alphas_cumprod[t - 1].item()
    eps = predict_noise(model, x_t, t, cond)
    x = (x_t - ((1 - alpha) / (1 - ab) ** 0.5) * eps) / alpha ** 0.5
    if t > 1:
        if noise is None:
            noise = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
        x = x + schedule.sigmas[t - 1].item() * noise
    return x

def denoise_via_diffusion(x_hat, t_diff, model, schedule, rng=None, cond=None, verbose=False):
    '''Diffuse x_hat to step t_diff in one jump, then walk the reverse chain back to step 0.'''
    _check_t(t_diff, schedule, lo=0)
    t_diff = int(t_diff)
    if t_diff == 0:
        return x_hat
    x = forward_diffuse(x_hat, t_diff, schedule, rng)
    for t in tqdm(range(t_diff, 0, -1), disable=not verbose, leave=False):
        x = reverse_denoise_step(x, t, model, schedule, rng, cond=cond)
    return x

########################################################################################################
# training

@dataclass
class TrainConfig:
    batch_size: int = 256
    steps: int = 3000
    lr: float = 1e-3
    seed: int = 0
    hidden: int = 256
    n_blocks: int = 4
    log_every: int = 500
    lr_floor: float = 0.1           # cosine decay ends at lr * lr_floor
    ae_noise: float = 0.5           # corruption std for autoencoder training, normalized units

    def __post_init__(self):
        if self.batch_size <= 0 or self.steps < 0 or not self.lr > 0 or self.hidden <= 0 or self.n_blocks <= 0:
            raise ConfigError(f'invalid training config {self}')
        if not 0 <= self.lr_floor <= 1 or self.ae_noise < 0:
            raise ConfigError(f'invalid training config {self}')
        if self.hidden % HEADS:
            raise ConfigError(f'hidden={self.hidden} must be a multiple of {HEADS} attention heads')

def _as_dataset(data, name):
    if isinstance(data, torch.Tensor):
        x = data
    else:
        rows = [torch.as_tensor(r, dtype=DTYPE).reshape(-1) for r in data]
        if len(rows) and len({len(r) for r in rows}) != 1:
            raise ShapeError(f'{name} vectors differ in dimension')
        x = torch.stack(rows) if rows else torch.zeros(0, 0, dtype=DTYPE)
    if x.dim() not in (2, 3):
        raise ShapeError(f'{name} must be rows [N, D] or clips [N, K, D]')
    return x.to(DTYPE)

def _training_data(data, cond):
    x = _as_dataset(data, 'dataset')
    if x.shape[0] == 0:
        raise InvalidInputError('empty training set')
    c = None
    if cond is not None:
        c = _as_dataset(cond, 'condition')
        if c.shape[:-1] != x.shape[:-1]:
            raise ShapeError('condition rows do not match the dataset')
    return x, c

def denoiser_loss(model, x0, schedule, rng, cond=None, t=None):
    '''Per-dimension mean of (eps_hat - n)^2 at uniformly drawn steps.'''
    B = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T_max + 1, (B,), generator=rng)
    n = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    xt = forward_diffuse(x0, t, schedule, noise=n)
    return ((model(xt, t, cond) - n) ** 2).mean()

def reconstruction_loss(model, x0, rng, noise, cond=None):
    '''Mean squared error of rebuilding x0 from a Gaussian-corrupted copy.'''
    xn = x0 + noise * torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    return ((model(xn, cond) - x0) ** 2).mean()

def _fit(model, x, c, cfg, loss_fn, verbose):
    gen = generator(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.steps, 1), eta_min=cfg.lr * cfg.lr_floor)
    losses = []
    model.train()
    for step in tqdm(range(cfg.steps), disable=not verbose):
        idx = torch.randint(0, x.shape[0], (cfg.batch_size,), generator=gen)
        loss = loss_fn(model, x[idx], gen, None if c is None else c[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.debug(f'step {step} loss {losses[-1]:.5f}')
    model.eval()
    if losses:
        log.info(f'trained {type(model).__name__} dim={x.shape[-1]} steps={cfg.steps} loss {losses[0]:.4f} -> {losses[-1]:.4f}')
    return model, losses

def _seeded(cfg, build):
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return build().to(DTYPE)

def train_denoiser(data, config=None, schedule=None, cond=None, verbose=False):
    '''Adam on the noise-prediction loss. [N, K, D] clips train a frame-attention network.

    Returns (model, per-step losses).
    '''
    cfg = config or TrainConfig()
    schedule = schedule or build_linear_schedule()
    x, c = _training_data(data, cond)
    model = _seeded(cfg, lambda: DenoiserModel(x.shape[-1], 0 if c is None else c.shape[-1], cfg.hidden, cfg.n_blocks,
                                               temporal=x.dim() == 3))
    return _fit(model, x, c, cfg, lambda m, xb, g, cb: denoiser_loss(m, xb, schedule, g, cb), verbose)

def train_autoencoder(data, config=None, cond=None, verbose=False):
    '''Denoising autoencoder on the same rows or clips a denoiser would see. Returns (model, per-step losses).'''
    cfg = config or TrainConfig()
    x, c = _training_data(data, cond)
    model = _seeded(cfg, lambda: DenoisingAutoencoder(x.shape[-1], 0 if c is None else c.shape[-1], cfg.hidden,
                                                      cfg.n_blocks, temporal=x.dim() == 3))
    return _fit(model, x, c, cfg, lambda m, xb, g, cb: reconstruction_loss(m, xb, g, cfg.ae_noise, cb), verbose)

def denoise_via_autoencoder(x_hat, model, cond=None):
    '''One encode/decode pass in place of the diffuse-then-reverse chain.'''
    return _run(model, x_hat, cond)
