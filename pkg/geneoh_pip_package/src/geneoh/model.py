########################################################################################################
# GeneOH - generalizable hand-object interaction denoising
########################################################################################################

import os, math, struct, logging
import numpy as np
import torch
from torch import nn
from typing import Optional

from .utils import CheckpointError, atomic_write_bytes

log = logging.getLogger('geneoh.model')

########################################################################################################

if os.environ.get('GENEOH_JIT_ON') == '1':
    MyModule = torch.jit.ScriptModule
    MyFunction = torch.jit.script_method
else:
    os.environ['GENEOH_JIT_ON'] = '0'
    MyModule = torch.nn.Module
    def __nop(ob):
        return ob
    MyFunction = __nop

########################################################################################################

HEADS = 4

def sinusoid(freqs, t, dtype):
    args = t.to(dtype)[:, None] * freqs.to(dtype)[None]
    return torch.cat([torch.sin(args), torch.cos(args)], -1)

class ResBlock(MyModule):
    '''Pre-norm residual MLP; temporal blocks first mix frames with self-attention.'''

    def __init__(self, hidden, temporal=False, timed=True):
        super().__init__()
        self.temporal, self.timed = temporal, timed
        if temporal:
            self.ln_attn = nn.LayerNorm(hidden)
            self.attn = nn.MultiheadAttention(hidden, HEADS, batch_first=True)
        self.ln = nn.LayerNorm(hidden)
        self.fc1 = nn.Linear(hidden, hidden)
        if timed:
            self.temb = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, hidden)

    @MyFunction
    def forward(self, x, emb: Optional[torch.Tensor] = None):
        if self.temporal:
            a = self.ln_attn(x)
            x = x + self.attn(a, a, a, need_weights=False)[0]
        h = self.fc1(self.ln(x))
        if self.timed and emb is not None:
            h = h + self.temb(emb)
        return x + self.fc2(nn.functional.silu(h))

class DenoiserModel(MyModule):
    '''Time-conditioned residual network predicting the injected noise. The output layer starts at zero.

    Row models take [B, dim]; temporal models take [B, K, dim] clips and attend over the K frames.
    '''

    def __init__(self, dim, cond_dim=0, hidden=256, n_blocks=4, temporal=False):
        super().__init__()
        assert dim > 0 and cond_dim >= 0 and hidden > 0 and hidden % 2 == 0 and n_blocks > 0
        assert not temporal or hidden % HEADS == 0
        self.dim, self.cond_dim, self.hidden, self.n_blocks, self.temporal = dim, cond_dim, hidden, n_blocks, temporal
        half = hidden // 2
        self.register_buffer('freqs', torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half))
        self.time_mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.inp = nn.Linear(dim + cond_dim, hidden)
        self.blocks = nn.ModuleList([ResBlock(hidden, temporal) for _ in range(n_blocks)])
        self.ln_out = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @MyFunction
    def forward(self, x, t, cond: Optional[torch.Tensor] = None):
        emb = self.time_mlp(sinusoid(self.freqs, t, x.dtype))
        if cond is not None:
            x = torch.cat([x, cond], -1)
        h = self.inp(x)
        if self.temporal:
            emb = emb[:, None]
            h = h + sinusoid(self.freqs, torch.arange(h.shape[1]), h.dtype)
        for block in self.blocks:
            h = block(h, emb)
        return self.out(self.ln_out(h))

    @property
    def config(self):
        return {'dim': self.dim, 'cond_dim': self.cond_dim, 'hidden': self.hidden, 'n_blocks': self.n_blocks,
                'temporal': self.temporal}

class DenoisingAutoencoder(MyModule):
    '''Maps corrupted rows (or clips) back to clean ones through a narrow per-row latent.'''

    def __init__(self, dim, cond_dim=0, hidden=256, n_blocks=4, temporal=False, latent=0):
        super().__init__()
        assert dim > 0 and cond_dim >= 0 and hidden > 0 and hidden % 2 == 0 and n_blocks > 0
        assert not temporal or hidden % HEADS == 0
        latent = latent or max(2, min(dim, hidden) // 2)
        self.dim, self.cond_dim, self.hidden, self.n_blocks, self.temporal = dim, cond_dim, hidden, n_blocks, temporal
        self.latent = latent
        half = hidden // 2
        self.register_buffer('freqs', torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half))
        self.enc_in = nn.Linear(dim + cond_dim, hidden)
        self.encoder = nn.ModuleList([ResBlock(hidden, temporal, timed=False) for _ in range(n_blocks)])
        self.to_latent = nn.Sequential(nn.LayerNorm(hidden), nn.Linear(hidden, latent))
        self.dec_in = nn.Linear(latent + cond_dim, hidden)
        self.decoder = nn.ModuleList([ResBlock(hidden, temporal, timed=False) for _ in range(n_blocks)])
        self.ln_out = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, dim)

    @MyFunction
    def _frames(self, h):
        if self.temporal:
            h = h + sinusoid(self.freqs, torch.arange(h.shape[1]), h.dtype)
        return h

    @MyFunction
    def encode(self, x, cond: Optional[torch.Tensor] = None):
        h = self._frames(self.enc_in(x if cond is None else torch.cat([x, cond], -1)))
        for block in self.encoder:
            h = block(h)
        return self.to_latent(h)

    @MyFunction
    def decode(self, z, cond: Optional[torch.Tensor] = None):
        h = self._frames(self.dec_in(z if cond is None else torch.cat([z, cond], -1)))
        for block in self.decoder:
            h = block(h)
        return self.out(self.ln_out(h))

    @MyFunction
    def forward(self, x, cond: Optional[torch.Tensor] = None):
        return self.decode(self.encode(x, cond), cond)

    @property
    def config(self):
        return {'dim': self.dim, 'cond_dim': self.cond_dim, 'hidden': self.hidden, 'n_blocks': self.n_blocks,
                'temporal': self.temporal, 'latent': self.latent}

########################################################################################################
# GOHD checkpoint: little-endian header + named f32 tensor table

MAGIC = b'GOHD'
VERSION = 2
FLAG_TEMPORAL = 1
FLAG_AUTOENCODER = 2
STATS_PREFIX = '_stats.'

def _pack_tensor(name, x):
    raw = name.encode('utf-8')
    arr = np.ascontiguousarray(x.detach().cpu().numpy().astype('<f4'))
    out = [struct.pack('<I', len(raw)), raw, struct.pack('<BI', 0, arr.ndim)]
    out += [struct.pack('<I', d) for d in arr.shape]
    out.append(arr.tobytes())
    return b''.join(out)

def encode_checkpoint(model, schedule, extras=None):
    tensors = [(k, v) for k, v in model.state_dict().items() if k != 'freqs']
    for k, v in (extras or {}).items():
        tensors.append((STATS_PREFIX + k, torch.as_tensor(v)))
    cfg = model.config
    flags = (FLAG_TEMPORAL if cfg['temporal'] else 0) | (FLAG_AUTOENCODER if isinstance(model, DenoisingAutoencoder) else 0)
    head = MAGIC + struct.pack('<IIdd', VERSION, schedule.T_max, schedule.beta_start, schedule.beta_end)
    head += struct.pack('<IIIIIII', cfg['dim'], cfg['cond_dim'], cfg['hidden'], cfg['n_blocks'], flags,
                        cfg.get('latent', 0), len(tensors))
    return head + b''.join(_pack_tensor(k, v) for k, v in tensors)

class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError('truncated checkpoint')
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

def decode_checkpoint(data, dtype=torch.float64):
    '''Returns (model, schedule, extras); the model is a DenoiserModel or a DenoisingAutoencoder.'''
    from .diffusion import build_linear_schedule
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError('not a GOHD checkpoint')
    version, T_max, beta_start, beta_end = r.unpack('<IIdd')
    if version != VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}')
    dim, cond_dim, hidden, n_blocks, flags, latent, count = r.unpack('<IIIIIII')
    if flags & ~(FLAG_TEMPORAL | FLAG_AUTOENCODER):
        raise CheckpointError(f'unknown checkpoint flags {flags:#x}')
    tensors = {}
    for _ in range(count):
        n, = r.unpack('<I')
        name = r.take(n).decode('utf-8')
        tag, rank = r.unpack('<BI')
        if tag != 0:
            raise CheckpointError(f'unsupported dtype tag {tag} for {name}')
        shape = r.unpack('<' + 'I' * rank) if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype='<f4').reshape(shape)
        tensors[name] = torch.tensor(arr.astype(np.float32)).to(dtype)
    if r.pos != len(data):
        raise CheckpointError('trailing bytes in checkpoint')

    temporal = bool(flags & FLAG_TEMPORAL)
    try:
        if flags & FLAG_AUTOENCODER:
            model = DenoisingAutoencoder(dim, cond_dim, hidden, n_blocks, temporal, latent).to(dtype)
        else:
            model = DenoiserModel(dim, cond_dim, hidden, n_blocks, temporal).to(dtype)
    except AssertionError as e:
        raise CheckpointError(f'invalid model header {(dim, cond_dim, hidden, n_blocks, flags)}') from e
    state = {k: v for k, v in tensors.items() if not k.startswith(STATS_PREFIX)}
    state['freqs'] = model.freqs
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(str(e)) from e
    model.eval()
    extras = {k[len(STATS_PREFIX):]: v for k, v in tensors.items() if k.startswith(STATS_PREFIX)}
    return model, build_linear_schedule(T_max, beta_start, beta_end), extras

def save_checkpoint(path, model, schedule, extras=None):
    atomic_write_bytes(path, encode_checkpoint(model, schedule, extras))
    log.info(f'saved {path}')

def load_checkpoint(path, dtype=torch.float64):
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read(), dtype)
