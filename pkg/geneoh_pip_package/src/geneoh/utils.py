########################################################################################################
# GeneOH - generalizable hand-object interaction denoising
########################################################################################################

import os, logging, tempfile
import numpy as np
import torch
from scipy.spatial.transform import Rotation

########################################################################################################

if os.environ.get('GENEOH_LOG') is None:
    os.environ['GENEOH_LOG'] = 'INFO'

log = logging.getLogger('geneoh')
if not log.handlers:
    _handler = logging.StreamHandler()
    _handler.setFormatter(logging.Formatter('%(asctime)s %(name)s %(levelname)s %(message)s'))
    log.addHandler(_handler)
    log.propagate = False
_level = logging.getLevelName(os.environ['GENEOH_LOG'].upper())
log.setLevel(_level if isinstance(_level, int) else logging.INFO)

DTYPE = torch.float64

########################################################################################################
# errors

class GeneOHError(Exception):
    pass

class InvalidInputError(GeneOHError, ValueError):
    pass

class ShapeError(GeneOHError, ValueError):
    pass

class InsufficientFramesError(GeneOHError, ValueError):
    pass

class UnsupportedInputError(GeneOHError):
    pass

class InvalidShapeError(GeneOHError, ValueError):
    pass

class GenerationError(GeneOHError):
    pass

class FittingError(GeneOHError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

class ConfigError(GeneOHError, ValueError):
    pass

class CheckpointError(GeneOHError):
    pass

def require_finite(name, *tensors):
    for x in tensors:
        if not bool(torch.isfinite(torch.as_tensor(x)).all()):
            raise InvalidInputError(f'{name} contains non-finite values')

########################################################################################################
# rotations (row-vector convention: world = local @ R + t, with R = R_col^T)

def generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g

def safe_norm(x, dim=-1, keepdim=False):
    # exact value, zero gradient at the origin
    sq = (x * x).sum(dim=dim, keepdim=keepdim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))

def skew(v):
    z = torch.zeros_like(v[..., 0])
    return torch.stack([
        torch.stack([z, -v[..., 2], v[..., 1]], -1),
        torch.stack([v[..., 2], z, -v[..., 0]], -1),
        torch.stack([-v[..., 1], v[..., 0], z], -1),
    ], -2)

def axis_angle_to_matrix(aa):
    '''Rodrigues map, column convention (x_world = R @ x). Differentiable everywhere.'''
    theta2 = (aa * aa).sum(-1)[..., None, None]
    small = theta2 < 1e-8
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(theta2_safe)
    a = torch.where(small, 1 - theta2 / 6, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(theta)) / theta2_safe)
    K = skew(aa)
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(K.shape)
    return eye + a * K + b * (K @ K)

def matrix_to_axis_angle(R):
    R = torch.as_tensor(R)
    flat = R.detach().reshape(-1, 3, 3).cpu().numpy()
    rv = Rotation.from_matrix(flat).as_rotvec()
    return torch.as_tensor(rv, dtype=R.dtype).reshape(R.shape[:-2] + (3,))

def quaternion_to_matrix(q):
    '''wxyz unit quaternion -> column-convention rotation matrix.'''
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        torch.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        torch.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], -2)

def matrix_to_quaternion(R):
    flat = torch.as_tensor(R).detach().reshape(-1, 3, 3).cpu().numpy()
    xyzw = Rotation.from_matrix(flat).as_quat()
    wxyz = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], 1)
    wxyz = wxyz * np.where(wxyz[:, :1] < 0, -1.0, 1.0)
    return torch.as_tensor(wxyz, dtype=DTYPE).reshape(tuple(R.shape[:-2]) + (4,))

def random_rotation(seed):
    '''Uniform random rotation, row convention.'''
    return torch.as_tensor(Rotation.random(random_state=int(seed)).as_matrix().T.copy(), dtype=DTYPE)

########################################################################################################
# files

def atomic_write_bytes(path, data):
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix='.tmp_', dir=folder)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise

def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode('utf-8'))
