########################################################################################################
# GeneOH - generalizable hand-object interaction denoising
########################################################################################################

import math, logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple
import numpy as np
import torch
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from .utils import (DTYPE, InvalidInputError, InvalidShapeError, ShapeError, GenerationError,
                    UnsupportedInputError, ConfigError, require_finite, safe_norm,
                    axis_angle_to_matrix, quaternion_to_matrix)

log = logging.getLogger('geneoh.scene')

########################################################################################################
# hand: wrist + 5 fingers x 4 joints
# local frame: x along the fingers, y toward the thumb, z out of the back of the hand (palm faces -z)

JOINT_COUNT = 21
FINGERS = ('thumb', 'index', 'middle', 'ring', 'pinky')
PARENTS = (-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19)
ARTICULATED = (1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19)
KNUCKLES = (0, 1, 5, 9, 13, 17)

REST_BONES = (
    (0.0, 0.0, 0.0),
    (0.020, 0.020, -0.008), (0.025, 0.022, -0.005), (0.022, 0.012, 0.0), (0.018, 0.008, 0.0),
    (0.090, 0.025, 0.0), (0.040, 0.002, 0.0), (0.024, 0.0, 0.0), (0.020, 0.0, 0.0),
    (0.094, 0.005, 0.0), (0.044, 0.0, 0.0), (0.027, 0.0, 0.0), (0.021, 0.0, 0.0),
    (0.088, -0.014, 0.0), (0.040, -0.002, 0.0), (0.026, 0.0, 0.0), (0.020, 0.0, 0.0),
    (0.078, -0.032, 0.0), (0.032, -0.004, 0.0), (0.019, 0.0, 0.0), (0.018, 0.0, 0.0),
)

# capsule radius of the bone ending at each joint, meters
BONE_RADII = (
    0.0,
    0.010, 0.009, 0.008, 0.007,
    0.010, 0.008, 0.007, 0.006,
    0.010, 0.008, 0.007, 0.006,
    0.010, 0.0075, 0.0065, 0.006,
    0.009, 0.007, 0.006, 0.005,
)

RING_POINTS = 8
CAP_POLAR = (math.pi / 6, math.pi / 3)      # latitude rings of each end cap, from the pole
CAP_POINTS = 1 + len(CAP_POLAR) * RING_POINTS

@dataclass(frozen=True)
class HandSkeleton:
    parents: Tuple[int, ...] = PARENTS
    rest_bones: torch.Tensor = field(default_factory=lambda: torch.tensor(REST_BONES, dtype=DTYPE))
    radii: torch.Tensor = field(default_factory=lambda: torch.tensor(BONE_RADII, dtype=DTYPE))

    def __post_init__(self):
        if len(self.parents) != JOINT_COUNT or tuple(self.rest_bones.shape) != (JOINT_COUNT, 3):
            raise InvalidInputError(f'skeleton must have {JOINT_COUNT} joints')
        if self.parents[0] != -1:
            raise InvalidInputError('joint 0 must be the root')
        for j in range(1, JOINT_COUNT):
            if not 0 <= self.parents[j] < j:
                raise InvalidInputError(f'joint {j} has invalid parent {self.parents[j]}')
        if bool((self.rest_bones[1:].norm(dim=-1) <= 0).any()):
            raise InvalidInputError('rest bone lengths must be positive')

    @property
    def finger_of(self):
        return tuple(-1 if j == 0 else (j - 1) // 4 for j in range(JOINT_COUNT))

    def rest_keypoints(self):
        out = [self.rest_bones[0]]
        for j in range(1, JOINT_COUNT):
            out.append(out[self.parents[j]] + self.rest_bones[j])
        return torch.stack(out)

    def flexion_axes(self):
        axes = []
        for f in range(5):
            d = self.rest_bones[2 + 4 * f]
            a = torch.stack([-d[1], d[0], torch.zeros_like(d[0])])
            axes.append(a / a.norm())
        return torch.stack(axes)

@dataclass
class HandParams:
    root_rot: torch.Tensor   # [..., 3] axis-angle
    root_trans: torch.Tensor # [..., 3] meters
    pose: torch.Tensor       # [..., 15, 3] axis-angle per articulated joint
    shape: torch.Tensor      # [..., 5] per-finger bone-length scale

    @staticmethod
    def rest(batch=(), dtype=DTYPE):
        batch = tuple(batch)
        return HandParams(torch.zeros(batch + (3,), dtype=dtype), torch.zeros(batch + (3,), dtype=dtype),
                          torch.zeros(batch + (15, 3), dtype=dtype), torch.ones(batch + (5,), dtype=dtype))

    def validate(self):
        require_finite('hand params', self.root_rot, self.root_trans, self.pose, self.shape)
        if bool(((self.shape <= 0.5) | (self.shape >= 2.0)).any()):
            raise InvalidInputError('shape scales must lie in (0.5, 2.0)')
        return self

    def __len__(self):
        return self.root_trans.shape[0]

    def __getitem__(self, idx):
        return HandParams(self.root_rot[idx], self.root_trans[idx], self.pose[idx], self.shape[idx])

    def detach(self):
        return HandParams(*(x.detach().clone() for x in (self.root_rot, self.root_trans, self.pose, self.shape)))

def forward_kinematics(skeleton, params, validate=True):
    if validate:
        require_finite('hand params', params.root_rot, params.root_trans, params.pose, params.shape)
    bones = skeleton.rest_bones.to(params.root_trans.dtype)
    finger_of = skeleton.finger_of
    R_local = axis_angle_to_matrix(params.pose)
    art_index = {j: i for i, j in enumerate(ARTICULATED)}
    G = [axis_angle_to_matrix(params.root_rot)] + [None] * (JOINT_COUNT - 1)
    P = [params.root_trans] + [None] * (JOINT_COUNT - 1)
    for j in range(1, JOINT_COUNT):
        p = skeleton.parents[j]
        bone = bones[j] * params.shape[..., finger_of[j], None]
        P[j] = P[p] + (G[p] @ bone[..., None])[..., 0]
        G[j] = G[p] @ R_local[..., art_index[j], :, :] if j in art_index else G[p]
    return torch.stack(P, -2)

########################################################################################################
# capsule surface

def surface_axial_counts(skeleton, density):
    if not density > 0:
        raise InvalidInputError('density must be positive')
    lengths = skeleton.rest_bones[1:].norm(dim=-1)
    return [max(2, int(round(float(L) * density)) + 1) for L in lengths]

def _ring_basis(J, d):
    palm = torch.cross(J[..., 5, :] - J[..., 0, :], J[..., 17, :] - J[..., 0, :], dim=-1)
    palm = palm / palm.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    ref = palm[..., None, :].expand(d.shape)
    u = ref - (ref * d).sum(-1, keepdim=True) * d
    un = u.norm(dim=-1, keepdim=True)
    eye = torch.eye(3, dtype=d.dtype)
    alt = torch.cross(d, eye[d.abs().argmin(-1)], dim=-1)
    alt = alt / alt.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    u = torch.where(un > 1e-6, u / un.clamp_min(1e-12), alt)
    w = torch.cross(d, u, dim=-1)
    return u, w

def hand_surface_from_keypoints(skeleton, J, density=500.0):
    '''Fixed-pattern capsule samples: rings along every bone plus a hemispherical cap at each end.

    Returns (points [..., M, 3], bone ids [M]).
    '''
    counts = surface_axial_counts(skeleton, density)
    parents = torch.tensor(skeleton.parents[1:])
    a = J[..., parents, :]
    b = J[..., 1:, :]
    seg = b - a
    d = seg / seg.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    u, w = _ring_basis(J, d)
    phi = torch.arange(RING_POINTS, dtype=J.dtype) * (2 * math.pi / RING_POINTS)
    ring = torch.cos(phi)[:, None, None] * u[..., None, :, :] + torch.sin(phi)[:, None, None] * w[..., None, :, :]
    polar = torch.tensor(CAP_POLAR, dtype=J.dtype)
    pts, ids = [], []
    for i, n in enumerate(counts):
        ts = torch.linspace(0, 1, n, dtype=J.dtype)
        axis = a[..., None, i, :] + ts[:, None] * seg[..., None, i, :]              # [..., n, 3]
        r = skeleton.radii[i + 1].to(J.dtype)
        p = axis[..., :, None, :] + r * ring[..., None, :, i, :]                   # [..., n, R, 3]
        pts.append(p.reshape(p.shape[:-3] + (n * RING_POINTS, 3)))
        for end, sign in ((b[..., i, :], 1.0), (a[..., i, :], -1.0)):
            tip = sign * d[..., i, :]
            lat = torch.cos(polar)[:, None, None] * tip[..., None, None, :] \
                + torch.sin(polar)[:, None, None] * ring[..., None, :, i, :]       # [..., P, R, 3]
            cap = torch.cat([tip[..., None, :], lat.reshape(lat.shape[:-3] + (-1, 3))], -2)
            pts.append(end[..., None, :] + r * cap)
        ids.append(torch.full((n * RING_POINTS + 2 * CAP_POINTS,), i + 1, dtype=torch.long))
    return torch.cat(pts, -2), torch.cat(ids)

def sample_hand_surface(skeleton, params, density=500.0):
    params.validate()
    points, _ = hand_surface_from_keypoints(skeleton, forward_kinematics(skeleton, params, validate=False), density)
    return points

def point_segment_distance(q, a, b):
    ab = b - a
    t = (((q - a) * ab).sum(-1) / (ab * ab).sum(-1).clamp_min(1e-18)).clamp(0, 1)
    return (q - (a + t[..., None] * ab)).norm(dim=-1)

def hand_capsule_sdf(skeleton, J, q):
    parents = torch.tensor(skeleton.parents[1:])
    a, b = J[parents], J[1:]
    dist = point_segment_distance(q[:, None, :], a[None], b[None]) - skeleton.radii[1:].to(q.dtype)[None]
    return dist.min(-1).values

########################################################################################################
# objects

OBJECT_KINDS = ('sphere', 'box', 'cylinder', 'torus')
DEFAULT_DIMS = {
    'sphere': (0.05,),                  # radius
    'box': (0.04, 0.03, 0.05),          # half extents
    'cylinder': (0.035, 0.06),          # radius, half height
    'torus': (0.05, 0.015),             # major, minor radius
}
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))

@dataclass
class ObjectShape:
    kind: str
    dims: Tuple[float, ...]
    samples: torch.Tensor  # [M, 3] rest frame
    normals: torch.Tensor  # [M, 3]
    n_requested: int = 0   # sample count passed to make_object; only spheres hit it exactly

    @property
    def bounding_radius(self):
        return float(self.samples.norm(dim=-1).max()) if len(self.samples) else 0.0

@dataclass
class ObjectPose:
    quat: torch.Tensor   # [..., 4] wxyz
    trans: torch.Tensor  # [..., 3]

    def __post_init__(self):
        self.quat = torch.as_tensor(self.quat, dtype=DTYPE)
        self.trans = torch.as_tensor(self.trans, dtype=DTYPE)
        n = self.quat.norm(dim=-1, keepdim=True)
        if bool((n < 1e-6).any()):
            raise InvalidInputError('degenerate quaternion')
        self.quat = self.quat / n

    @staticmethod
    def identity(batch=()):
        q = torch.zeros(tuple(batch) + (4,), dtype=DTYPE)
        q[..., 0] = 1
        return ObjectPose(q, torch.zeros(tuple(batch) + (3,), dtype=DTYPE))

    def matrix(self):
        '''Column convention: world = R @ rest + t.'''
        return quaternion_to_matrix(self.quat)

    def rows(self):
        '''Row convention: world = rest @ R + t.'''
        return self.matrix().transpose(-1, -2)

    def apply(self, rest):
        return rest @ self.rows() + self.trans[..., None, :]

    def __getitem__(self, idx):
        return ObjectPose(self.quat[idx], self.trans[idx])

def _sphere_samples(r, n):
    i = torch.arange(n, dtype=DTYPE) + 0.5
    z = 1 - 2 * i / n
    rho = torch.sqrt((1 - z * z).clamp_min(0))
    phi = i * GOLDEN_ANGLE
    nrm = torch.stack([rho * torch.cos(phi), rho * torch.sin(phi), z], -1)
    nrm = nrm / nrm.norm(dim=-1, keepdim=True)
    return nrm * r, nrm

def _grid(n_a, n_b, ha, hb):
    ga = (torch.arange(n_a, dtype=DTYPE) + 0.5) / n_a * 2 * ha - ha
    gb = (torch.arange(n_b, dtype=DTYPE) + 0.5) / n_b * 2 * hb - hb
    A, B = torch.meshgrid(ga, gb, indexing='ij')
    return A.reshape(-1), B.reshape(-1)

def _box_samples(h, n):
    h = torch.tensor(h, dtype=DTYPE)
    areas = torch.stack([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
    total = 2 * areas.sum()
    pts, nrms = [], []
    for a in range(3):
        b, c = [x for x in range(3) if x != a]
        n_face = max(1.0, float(n * areas[a] / total))
        nb = max(1, int(round(math.sqrt(n_face * float(h[b] / h[c])))))
        nc = max(1, int(round(n_face / nb)))
        gb, gc = _grid(nb, nc, float(h[b]), float(h[c]))
        for s in (-1.0, 1.0):
            p = torch.zeros(len(gb), 3, dtype=DTYPE)
            p[:, a] = s * h[a]
            p[:, b], p[:, c] = gb, gc
            nr = torch.zeros_like(p)
            nr[:, a] = s
            pts.append(p)
            nrms.append(nr)
    return torch.cat(pts), torch.cat(nrms)

def _cylinder_samples(r, hh, n):
    side, cap = 2 * math.pi * r * 2 * hh, math.pi * r * r
    n_side = max(8, int(n * side / (side + 2 * cap)))
    n_cap = max(4, (n - n_side) // 2)
    n_phi = max(4, int(round(math.sqrt(n_side * 2 * math.pi * r / (2 * hh)))))
    n_z = max(1, int(round(n_side / n_phi)))
    phi = (torch.arange(n_phi, dtype=DTYPE) + 0.5) / n_phi * 2 * math.pi
    z = (torch.arange(n_z, dtype=DTYPE) + 0.5) / n_z * 2 * hh - hh
    P, Z = torch.meshgrid(phi, z, indexing='ij')
    P, Z = P.reshape(-1), Z.reshape(-1)
    nrm = torch.stack([torch.cos(P), torch.sin(P), torch.zeros_like(P)], -1)
    pts = [torch.stack([r * torch.cos(P), r * torch.sin(P), Z], -1)]
    nrms = [nrm]
    i = torch.arange(n_cap, dtype=DTYPE) + 0.5
    rho = r * torch.sqrt(i / n_cap)
    ang = i * GOLDEN_ANGLE
    for s in (-1.0, 1.0):
        pts.append(torch.stack([rho * torch.cos(ang), rho * torch.sin(ang), torch.full_like(rho, s * hh)], -1))
        nrms.append(torch.tensor([0.0, 0.0, s], dtype=DTYPE).expand(n_cap, 3))
    return torch.cat(pts), torch.cat(nrms)

def _torus_samples(R, r, n):
    nu = max(4, int(round(math.sqrt(n * R / r))))
    nv = max(4, int(round(n / nu)))
    u = (torch.arange(nu, dtype=DTYPE) + 0.5) / nu * 2 * math.pi
    v = (torch.arange(nv, dtype=DTYPE) + 0.5) / nv * 2 * math.pi
    U, V = torch.meshgrid(u, v, indexing='ij')
    U, V = U.reshape(-1), V.reshape(-1)
    nrm = torch.stack([torch.cos(V) * torch.cos(U), torch.cos(V) * torch.sin(U), torch.sin(V)], -1)
    pts = torch.stack([(R + r * torch.cos(V)) * torch.cos(U), (R + r * torch.cos(V)) * torch.sin(U), r * torch.sin(V)], -1)
    return pts, nrm

def make_object(kind='sphere', dims=None, n_samples=2048):
    if kind not in OBJECT_KINDS:
        raise InvalidInputError(f'unknown object kind {kind!r}')
    dims = tuple(float(x) for x in (dims if dims is not None else DEFAULT_DIMS[kind]))
    if len(dims) != len(DEFAULT_DIMS[kind]) or min(dims) <= 0:
        raise InvalidInputError(f'invalid dims {dims} for {kind}')
    if kind == 'torus' and dims[1] >= dims[0]:
        raise InvalidInputError('torus minor radius must be below the major radius')
    if n_samples <= 0:
        raise InvalidShapeError('object needs surface samples')
    if kind == 'sphere':
        pts, nrm = _sphere_samples(dims[0], n_samples)
    elif kind == 'box':
        pts, nrm = _box_samples(dims, n_samples)
    elif kind == 'cylinder':
        pts, nrm = _cylinder_samples(dims[0], dims[1], n_samples)
    else:
        pts, nrm = _torus_samples(dims[0], dims[1], n_samples)
    return ObjectShape(kind, dims, pts, nrm, int(n_samples))

def rest_sdf(kind, dims, p):
    if kind == 'sphere':
        return safe_norm(p) - dims[0]
    if kind == 'box':
        q = p.abs() - torch.tensor(dims, dtype=p.dtype)
        return safe_norm(q.clamp_min(0)) + q.max(-1).values.clamp_max(0)
    if kind == 'cylinder':
        q = torch.stack([safe_norm(p[..., :2]) - dims[0], p[..., 2].abs() - dims[1]], -1)
        return safe_norm(q.clamp_min(0)) + q.max(-1).values.clamp_max(0)
    if kind == 'torus':
        q = torch.stack([safe_norm(p[..., :2]) - dims[0], p[..., 2]], -1)
        return safe_norm(q) - dims[1]
    raise InvalidInputError(f'unknown object kind {kind!r}')

def object_sdf(shape, pose, p):
    '''(signed distance, unit normal) of world points p [..., 3]; pose may carry leading batch dims matching p[..., :-2].'''
    p = torch.as_tensor(p, dtype=DTYPE)
    require_finite('query point', p)
    R = pose.rows()
    single = p.dim() == 1
    q = p[None] if single else p
    if pose.trans.dim() == 1:
        rest = (q - pose.trans) @ R.transpose(-1, -2)
    else:
        rest = (q - pose.trans[..., None, :]) @ R.transpose(-1, -2)
    with torch.enable_grad():
        x = rest.detach().requires_grad_(True)
        d = rest_sdf(shape.kind, shape.dims, x)
        g, = torch.autograd.grad(d.sum(), x)
    n_rest = g / g.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    n = n_rest @ R
    d = d.detach()
    if single:
        return d[0], n[0]
    return d, n

########################################################################################################
# sequences

@dataclass
class HOISequence:
    keypoints: torch.Tensor              # [K, 21, 3]
    obj: ObjectShape
    poses: ObjectPose                    # batched over K
    hand_params: Optional[HandParams] = None

    @property
    def num_frames(self):
        return self.keypoints.shape[0]

    def validate(self, skeleton=None):
        K = self.num_frames
        if K < 2:
            raise InvalidInputError('a sequence needs at least 2 frames')
        if tuple(self.keypoints.shape) != (K, JOINT_COUNT, 3):
            raise ShapeError(f'keypoints must be [K, {JOINT_COUNT}, 3], got {tuple(self.keypoints.shape)}')
        if tuple(self.poses.trans.shape) != (K, 3):
            raise ShapeError('object poses do not match the frame count')
        require_finite('keypoints', self.keypoints)
        if self.hand_params is not None:
            self.hand_params.validate()
            J = forward_kinematics(skeleton or HandSkeleton(), self.hand_params, validate=False)
            if float((J - self.keypoints).abs().max()) > 1e-9:
                raise InvalidInputError('hand params do not reproduce the keypoints')
        return self

    def with_keypoints(self, keypoints, hand_params=None):
        return replace(self, keypoints=keypoints, hand_params=hand_params)

    def object_points(self):
        R = self.poses.rows()
        return self.obj.samples @ R + self.poses.trans[:, None, :], self.obj.normals @ R

@dataclass
class SceneConfig:
    num_frames: int = 30
    object_kind: str = 'sphere'
    object_dims: Optional[Tuple[float, ...]] = None
    n_object_samples: int = 2048
    motion_amplitude: float = 0.01      # meters, std of spline knots
    rotation_amplitude: float = 0.2     # radians, std of spline knots
    n_knots: int = 4
    curl_range: Tuple[float, float] = (0.2, 0.7)
    curl_wobble: float = 0.1
    clearance: float = 0.0005
    max_hand_distance: float = 0.15
    max_object_extent: float = 0.12
    surface_density: float = 500.0
    max_attempts: int = 8

    def __post_init__(self):
        if self.num_frames < 2:
            raise ConfigError('num_frames must be >= 2')
        if self.object_kind not in OBJECT_KINDS:
            raise ConfigError(f'unknown object kind {self.object_kind!r}')
        if self.n_knots < 2 or self.motion_amplitude < 0 or self.rotation_amplitude < 0:
            raise ConfigError('invalid motion spline settings')
        if self.max_attempts < 1:
            raise ConfigError('max_attempts must be >= 1')

def _object_trajectory(cfg, rng):
    K = cfg.num_frames
    times = np.linspace(0, K - 1, cfg.n_knots)
    base_t = rng.uniform(-0.1, 0.1, 3)
    base_R = Rotation.random(random_state=int(rng.integers(2 ** 31)))
    knots_t = rng.normal(0, cfg.motion_amplitude, (cfg.n_knots, 3))
    knots_r = rng.normal(0, cfg.rotation_amplitude / math.sqrt(3), (cfg.n_knots, 3))
    frames = np.arange(K)
    trans = base_t + CubicSpline(times, knots_t, bc_type='natural')(frames)
    rotvec = CubicSpline(times, knots_r, bc_type='natural')(frames)
    rot = base_R * Rotation.from_rotvec(rotvec)
    xyzw = rot.as_quat()
    quat = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], 1)
    return ObjectPose(torch.as_tensor(quat), torch.as_tensor(trans))

def _grasp_template(obj, rng):
    '''Hand orientation (columns x, y, z in object rest frame) and wrist position facing a surface point.'''
    if obj.kind == 'torus':
        a = rng.uniform(0, 2 * math.pi)
        u = np.array([math.cos(a), math.sin(a), 0.0])
    else:
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
    idx = int(np.argmax(obj.samples.numpy() @ u))
    s, n = obj.samples[idx].numpy(), obj.normals[idx].numpy()
    t1 = rng.normal(size=3)
    t1 -= t1.dot(n) * n
    t1 /= np.linalg.norm(t1)
    R_ho = np.stack([t1, np.cross(n, t1), n], 1)
    return R_ho, s, n

def generate_synthetic_sequence(config=None, seed=0, skeleton=None):
    '''A clean sequence: object on a C2 pose spline, hand attached by a grasp template and pushed out of the object.

    A grasp that cannot be projected out is redrawn from seeds derived from `seed`.
    '''
    cfg = config or SceneConfig()
    skeleton = skeleton or HandSkeleton()
    obj = make_object(cfg.object_kind, cfg.object_dims, cfg.n_object_samples)
    if obj.bounding_radius > cfg.max_object_extent:
        raise GenerationError(f'object extent {obj.bounding_radius:.3f} m exceeds hand reach {cfg.max_object_extent} m')
    last = None
    for attempt in range(cfg.max_attempts):
        rng = np.random.default_rng(seed if attempt == 0 else [seed, attempt])
        try:
            return _draw_sequence(cfg, rng, obj, skeleton)
        except GenerationError as e:
            log.debug(f'seed {seed} attempt {attempt}: {e}')
            last = e
    raise GenerationError(f'no feasible grasp for seed {seed} after {cfg.max_attempts} attempts: {last}')

def _draw_sequence(cfg, rng, obj, skeleton):
    K = cfg.num_frames
    poses = _object_trajectory(cfg, rng)
    R_ho, s, n = _grasp_template(obj, rng)
    palm_offset = float(skeleton.radii[5]) + cfg.clearance + 0.002
    wrist = s + n * palm_offset - R_ho[:, 0] * 0.055

    curl0 = rng.uniform(*cfg.curl_range, size=5)
    phase = rng.uniform(0, 2 * math.pi, size=5)
    k = np.arange(K)[:, None]
    curl = curl0[None] + cfg.curl_wobble * np.sin(2 * math.pi * k / max(K, 2) + phase[None])  # [K, 5]
    axes = skeleton.flexion_axes().numpy()
    gains = np.array([1.0, 1.2, 0.8])
    pose = np.zeros((K, 15, 3))
    for f in range(5):
        scale = 0.5 if f == 0 else 1.0
        for i in range(3):
            pose[:, 3 * f + i] = scale * gains[i] * curl[:, f:f + 1] * axes[f][None]
    shape = np.tile(rng.uniform(0.9, 1.1, 5), (K, 1))

    R_obj = poses.matrix().numpy()
    R_world = R_obj @ R_ho[None]
    root_rot = Rotation.from_matrix(R_world).as_rotvec()
    root_trans = np.einsum('kij,j->ki', R_obj, wrist) + poses.trans.numpy()
    params = HandParams(torch.as_tensor(root_rot), torch.as_tensor(root_trans),
                        torch.as_tensor(pose), torch.as_tensor(shape))
    params = _push_out(skeleton, params, obj, poses, cfg)

    J = forward_kinematics(skeleton, params)
    d_kp, _ = object_sdf(obj, poses, J)
    if float(d_kp.max()) > cfg.max_hand_distance:
        raise GenerationError('hand keypoints drift further than the allowed distance from the object')
    return HOISequence(J, obj, poses, params)

def _push_out(skeleton, params, obj, poses, cfg, max_iters=60, patience=10, open_factor=0.8, max_opens=8):
    '''Translate each frame's root along the depth-weighted sum of penetrating normals.

    When the pushes cancel (fingers wrapped around an edge) the whole sequence's curl is opened and the push restarts.
    '''
    trans, pose = params.root_trans.clone(), params.pose.clone()
    worst = float('inf')
    for _ in range(max_opens + 1):
        stall = 0
        for _ in range(max_iters):
            pts = sample_hand_surface(skeleton, replace(params, root_trans=trans, pose=pose), cfg.surface_density)
            d, nrm = object_sdf(obj, poses, pts)
            depth = (cfg.clearance - d).clamp_min(0)                                   # [K, M]
            deepest = depth.max(-1).values
            todo = deepest > 0
            if not bool(todo.any()):
                return replace(params, root_trans=trans, pose=pose)
            push = (depth[..., None] * nrm).sum(-2)
            push = push / push.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            step = (deepest + 1e-5)[:, None] * push
            trans = trans + torch.where(todo[:, None], step, torch.zeros_like(step))
            cur = float(deepest.max())
            stall = 0 if cur < worst - 1e-5 else stall + 1
            worst = min(worst, cur)
            if stall >= patience:
                break
        pose = pose * open_factor
        worst = float('inf')
    out = replace(params, root_trans=trans, pose=pose)
    d, _ = object_sdf(obj, poses, sample_hand_surface(skeleton, out, cfg.surface_density))
    if float(d.min()) < -1e-4:
        raise GenerationError(f'could not project the hand out of the object (min sdf {float(d.min()):.2e})')
    return out

########################################################################################################
# noise

NOISE_MODES = ('gaussian', 'beta')

def draw_parameter_noise(num_frames, mode, scales, seed):
    if mode not in NOISE_MODES:
        raise InvalidInputError(f'unknown noise mode {mode!r}')
    rng = np.random.default_rng(seed)
    shapes = ((num_frames, 3), (num_frames, 3), (num_frames, 15, 3))
    out = []
    for scale, shp in zip(scales, shapes):
        if mode == 'gaussian':
            x = rng.normal(0.0, 1.0, shp)
        else:
            x = rng.beta(8.0, 2.0, shp)
        out.append(torch.as_tensor(x * float(scale), dtype=DTYPE))
    return {'root_trans': out[0], 'root_rot': out[1], 'pose': out[2]}

def _perturb(seq, mode, scales, seed, skeleton):
    if seq.hand_params is None:
        raise UnsupportedInputError('parameter-space noise needs per-frame hand params')
    if any(float(s) < 0 for s in scales):
        raise InvalidInputError('noise scales must be non-negative')
    if all(float(s) == 0 for s in scales):
        return replace(seq)
    noise = draw_parameter_noise(seq.num_frames, mode, scales, seed)
    p = seq.hand_params
    noisy = HandParams(p.root_rot + noise['root_rot'], p.root_trans + noise['root_trans'],
                       p.pose + noise['pose'], p.shape.clone())
    J = forward_kinematics(skeleton or HandSkeleton(), noisy)
    return replace(seq, keypoints=J, hand_params=noisy)

def perturb_gaussian(seq, stds=(0.01, 0.1, 0.5), seed=0, skeleton=None):
    return _perturb(seq, 'gaussian', stds, seed, skeleton)

def perturb_beta(seq, scales=(0.01, 0.05, 0.3), seed=0, skeleton=None):
    return _perturb(seq, 'beta', scales, seed, skeleton)
