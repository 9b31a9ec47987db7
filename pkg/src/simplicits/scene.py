"""
Scene files: a line-oriented ``section.key = value`` format.

Example::

    # a bar that drops onto the floor
    geometry.type = beam
    geometry.size = 2 0.5 0.5
    geometry.center = 0 0 1
    material.0.youngs = 1e5
    train.handles = 4
    sim.frames = 150
    colliders.0.type = ground

Vectors are whitespace separated, lists of vectors are comma separated.
Unknown keys are errors.  Omitted keys take the defaults of the owning
config class.
"""

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .occupancy import MaterialRegion
from .reduced_sim import Collider, PinRegion, Script, SimConfig
from .training import TrainConfig

__all__ = ['SceneError', 'ExportConfig', 'SceneConfig', 'parse_scene', 'parse_scene_text',
           'serialize_scene']


class SceneError(ValueError):
    pass


@dataclass
class ExportConfig:
    dir: str = 'frames'
    stride: int = 1
    formats: tuple = ('transforms', 'points')
    mesh: str = None
    splats: str = None

    def validate(self):
        if self.stride < 1:
            raise ValueError('export.stride must be >= 1')
        unknown = set(self.formats) - {'transforms', 'points', 'mesh', 'splats'}
        if unknown:
            raise ValueError(f'unknown export formats {sorted(unknown)}')
        return self


@dataclass
class SceneConfig:
    geometry: dict
    materials: list = field(default_factory=lambda: [MaterialRegion()])
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    export: ExportConfig = field(default_factory=ExportConfig)
    base_dir: str = '.'

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


# --------------------------------------------------------------------------
# value codecs
# --------------------------------------------------------------------------

def _float(s):
    return float(s)


def _int(s):
    v = float(s)
    if v != int(v):
        raise ValueError(f'expected an integer, got {s!r}')
    return int(v)


def _str(s):
    return s.strip()


def _opt_int(s):
    return None if s.strip() == 'none' else _int(s)


def _opt_float(s):
    return None if s.strip() == 'none' else _float(s)


def _opt_str(s):
    return None if s.strip() == 'none' else _str(s)


def _vec3(s):
    parts = s.replace(',', ' ').split()
    if len(parts) != 3:
        raise ValueError(f'expected 3 numbers, got {s!r}')
    return tuple(float(p) for p in parts)


def _floats(s):
    return tuple(float(p) for p in s.replace(',', ' ').split())


def _vec3_list(s):
    return tuple(_vec3(chunk) for chunk in s.split(','))


def _words(s):
    return tuple(s.replace(',', ' ').split())


def _fmt(value):
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return value
    if all(isinstance(v, tuple) for v in value):
        return ', '.join(_fmt(v) for v in value)
    return ' '.join(_fmt(v) for v in value)


_GEOMETRY_KEYS = {
    'type': _str,
    'center': _vec3,
    'radius': _float,
    'min': _vec3,
    'max': _vec3,
    'size': _vec3,
    'major_radius': _float,
    'minor_radius': _float,
    'a': _vec3,
    'b': _vec3,
    'path': _str,
    'threshold': _float,
    'bbox_min': _vec3,
    'bbox_max': _vec3,
}

# scene key -> (attribute, parser)
_MATERIAL_KEYS = {
    'region': ('region', _str),
    'density': ('density', _float),
    'youngs': ('youngs', _float),
    'poisson': ('poisson', _float),
    'min': ('lo', _vec3),
    'max': ('hi', _vec3),
    'center': ('center', _vec3),
    'radius': ('radius', _float),
}

_TRAIN_KEYS = {
    'handles': ('n_handles', _int),
    'depth': ('depth', _int),
    'width': ('width', _int),
    'steps': ('steps', _int),
    'lr_start': ('lr_start', _float),
    'lr_end': ('lr_end', _float),
    'batch_transforms': ('batch_transforms', _int),
    'cubature': ('cubature_per_step', _int),
    'sigma': ('transform_sigma', _float),
    'elastic_weight': ('elastic_weight', _float),
    'ortho_weight': ('ortho_weight', _float),
    'seed': ('seed', _int),
    'energy': ('energy', _str),
}

_SIM_KEYS = {
    'timestep': ('timestep', _float),
    'gravity': ('gravity', _vec3),
    'frames': ('frames', _int),
    'newton_iters': ('newton_iters', _int),
    'newton_tol': ('newton_tol', _float),
    'barrier_iters': ('barrier_iters', _int),
    'barrier_kappa': ('barrier_kappa', _float),
    'barrier_growth': ('barrier_growth', _float),
    'barrier_dhat': ('barrier_dhat', _opt_float),
    'penalty': ('penalty', _opt_float),
    'cubature': ('cubature', _int),
    'seed': ('seed', _int),
    'energy': ('energy', _str),
}

_EXPORT_KEYS = {
    'dir': ('dir', _str),
    'stride': ('stride', _int),
    'formats': ('formats', _words),
    'mesh': ('mesh', _opt_str),
    'splats': ('splats', _opt_str),
}

_PIN_KEYS = {
    'min': ('lo', _vec3),
    'max': ('hi', _vec3),
    'axes': ('axes', _str),
    'script': ('script', _opt_int),
}

_SCRIPT_KEYS = {
    'times': ('times', _floats),
    'translations': ('translations', _vec3_list),
    'rotations': ('rotations', _vec3_list),
    'pivot': ('pivot', _vec3),
}

_COLLIDER_KEYS = {
    'type': ('kind', _str),
    'height': ('height', _float),
    'center': ('center', _vec3),
    'radius': ('radius', _float),
    'half_size': ('half_size', _vec3),
}

_INDEXED = {
    'material': _MATERIAL_KEYS,
    'pins': _PIN_KEYS,
    'script': _SCRIPT_KEYS,
    'colliders': _COLLIDER_KEYS,
}

_FLAT = {
    'train': _TRAIN_KEYS,
    'sim': _SIM_KEYS,
    'export': _EXPORT_KEYS,
}


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

def _lines(text):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if line:
            yield lineno, line


def _indexed_list(entries, build, what):
    out = []
    for expected, idx in enumerate(sorted(entries)):
        if idx != expected:
            raise SceneError(f'{what} indices must be contiguous from 0; missing {what}.{expected}')
        out.append(build(entries[idx]))
    return out


def parse_scene_text(text, base_dir='.', check_files=True):
    geometry = {}
    flat = {section: {} for section in _FLAT}
    indexed = {section: {} for section in _INDEXED}
    seen = {}

    for lineno, line in _lines(text):
        if '=' not in line:
            raise SceneError(f'line {lineno}: syntax error, expected "section.key = value"')
        key, value = (part.strip() for part in line.split('=', 1))
        if key in seen:
            raise SceneError(f'line {lineno}: duplicate key {key!r} (first on line {seen[key]})')
        seen[key] = lineno
        parts = key.split('.')
        try:
            if parts[0] == 'geometry' and len(parts) == 2 and parts[1] in _GEOMETRY_KEYS:
                geometry[parts[1]] = _GEOMETRY_KEYS[parts[1]](value)
            elif parts[0] in _FLAT and len(parts) == 2 and parts[1] in _FLAT[parts[0]]:
                attr, conv = _FLAT[parts[0]][parts[1]]
                flat[parts[0]][attr] = conv(value)
            elif (parts[0] in _INDEXED and len(parts) == 3 and parts[1].isdigit()
                    and parts[2] in _INDEXED[parts[0]]):
                attr, conv = _INDEXED[parts[0]][parts[2]]
                indexed[parts[0]].setdefault(int(parts[1]), {})[attr] = conv(value)
            else:
                raise SceneError(f'line {lineno}: unknown key {key!r}')
        except SceneError:
            raise
        except ValueError as exc:
            raise SceneError(f'line {lineno}: bad value for {key!r}: {exc}') from None

    if 'type' not in geometry:
        raise SceneError('scene is missing geometry.type')

    try:
        materials = _indexed_list(indexed['material'], lambda kw: MaterialRegion(**kw), 'material')
        if not materials:
            materials = [MaterialRegion()]
        if materials[0].region != 'object':
            raise SceneError('material.0 must cover the whole object (region = object)')
        scripts = _indexed_list(indexed['script'], lambda kw: Script(**kw), 'script')
        pins = _indexed_list(indexed['pins'], lambda kw: PinRegion(**kw), 'pins')
        colliders = _indexed_list(indexed['colliders'], lambda kw: Collider(**kw), 'colliders')
        train = TrainConfig(**flat['train']).validate()
        sim = SimConfig(pins=pins, scripts=scripts, colliders=colliders, **flat['sim']).validate()
        export = ExportConfig(**flat['export']).validate()
    except SceneError:
        raise
    except (TypeError, ValueError) as exc:
        raise SceneError(f'range error: {exc}') from None

    scene = SceneConfig(geometry, materials, train, sim, export, str(base_dir))
    if check_files:
        for ref in (geometry.get('path'), export.mesh, export.splats):
            if ref is not None and not scene.resolve(ref).is_file():
                raise SceneError(f'referenced file does not exist: {ref}')
    return scene


def parse_scene(path, check_files=True):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SceneError(f'cannot read scene {path}: {exc}') from exc
    return parse_scene_text(text, base_dir=str(path.parent), check_files=check_files)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def _dump(prefix, obj, table):
    lines = []
    for key, (attr, _) in table.items():
        lines.append(f'{prefix}.{key} = {_fmt(getattr(obj, attr))}')
    return lines


def serialize_scene(scene):
    """Write every key explicitly so that parsing gives back an equal config."""
    lines = [f'geometry.{k} = {_fmt(v)}' for k, v in scene.geometry.items()]
    for i, mat in enumerate(scene.materials):
        table = {k: v for k, v in _MATERIAL_KEYS.items() if getattr(mat, v[0]) is not None}
        lines += _dump(f'material.{i}', mat, table)
    lines += _dump('train', scene.train, _TRAIN_KEYS)
    lines += _dump('sim', scene.sim, _SIM_KEYS)
    lines += _dump('export', scene.export, _EXPORT_KEYS)
    for i, pin in enumerate(scene.sim.pins):
        lines += _dump(f'pins.{i}', pin, _PIN_KEYS)
    for i, script in enumerate(scene.sim.scripts):
        lines += _dump(f'script.{i}', script, _SCRIPT_KEYS)
    for i, col in enumerate(scene.sim.colliders):
        lines += _dump(f'colliders.{i}', col, _COLLIDER_KEYS)
    return '\n'.join(lines) + '\n'


def geometry_spec(scene):
    """Geometry mapping ready for :func:`~simplicits.occupancy.build_occupancy`."""
    spec = dict(scene.geometry)
    lo, hi = spec.pop('bbox_min', None), spec.pop('bbox_max', None)
    if (lo is None) != (hi is None):
        raise SceneError('geometry.bbox_min and geometry.bbox_max go together')
    if lo is not None:
        spec['bbox'] = (lo, hi)
    return spec


def with_overrides(scene, **train_overrides):
    return replace(scene, train=replace(scene.train, **train_overrides))


_ = fields  # re-exported for callers introspecting configs
