"""
Command-line entry point.

    simplicits train --scene S --out W.swgt [--seed K]
    simplicits simulate --scene S --weights W.swgt --out DIR [--frames N] [--stride M]
    simplicits volume --scene S
    simplicits weights-grid --weights W.swgt --res R --out DIR [--scene S]

Exit status is 0 on success, 1 on a numerical failure and 2 on usage or
I/O errors.  ``SIMPLICITS_THREADS`` caps the BLAS/LAPACK thread pools.
"""

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from .export import (
    SplatError,
    TransformWriter,
    export_mesh,
    export_points,
    export_weight_grid,
    read_splt,
    transform_gaussians,
    write_splt,
)
from .linalg import LinAlgError
from .mlp import CheckpointError, DivergenceError, load_checkpoint, save_checkpoint
from .occupancy import OccupancyError, build_occupancy, estimate_volume, read_obj
from .reduced_sim import InfeasibleState, SimulationError, Simulator, build_cubature
from .scene import SceneError, geometry_spec, parse_scene
from .training import TrainingError, train

log = logging.getLogger('simplicits')

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _field(scene):
    return build_occupancy(geometry_spec(scene), scene.materials, base_dir=scene.base_dir)


def report_path(checkpoint):
    return Path(checkpoint).with_suffix('.report.csv')


def cmd_train(args):
    scene = parse_scene(args.scene)
    cfg = scene.train if args.seed is None else replace(scene.train, seed=args.seed)
    field_ = _field(scene)
    every = max(1, cfg.steps // 20)

    def progress(k, l_el, l_or):
        if k % every == 0 or k == cfg.steps - 1:
            log.info('step %d/%d  elastic %.6g  ortho %.6g', k + 1, cfg.steps, l_el, l_or)

    net, report = train(field_, cfg, progress)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out)
    report.write_csv(report_path(out))
    log.info('wrote %s', out)
    return EXIT_OK


def _rest_mesh(scene):
    if scene.export.mesh is not None:
        return read_obj(scene.resolve(scene.export.mesh))
    if scene.geometry.get('type') == 'mesh':
        return read_obj(scene.resolve(scene.geometry['path']))
    raise UsageError('mesh export requested but the scene has no export.mesh or mesh geometry')


def cmd_simulate(args):
    scene = parse_scene(args.scene)
    net = load_checkpoint(args.weights)
    if net.n_handles != scene.train.n_handles:
        raise UsageError(
            f'checkpoint has {net.n_handles} handles but the scene asks for '
            f'{scene.train.n_handles}'
        )
    frames = scene.sim.frames if args.frames is None else args.frames
    stride = scene.export.stride if args.stride is None else args.stride
    if frames < 1 or stride < 1:
        raise UsageError('--frames and --stride must be positive')
    formats = scene.export.formats
    mesh = _rest_mesh(scene) if 'mesh' in formats else None
    if 'splats' in formats:
        if scene.export.splats is None:
            raise UsageError('splat export requested but export.splats is not set')
        splats = read_splt(scene.resolve(scene.export.splats))

    field_ = _field(scene)
    cub = build_cubature(field_, net, scene.sim.cubature, scene.sim.seed)
    sim = Simulator(cub, scene.sim)
    state = sim.initial_state()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with TransformWriter(out / 'transforms.csv', net.n_handles) as writer:
        for _ in range(frames):
            state = sim.step(state)
            writer.write(state.frame, state.t, state.z)
            if state.frame % stride:
                continue
            tag = f'{state.frame:05d}'
            if 'points' in formats:
                export_points(out / f'points_{tag}.xyz', cub.positions(state.z))
            if mesh is not None:
                export_mesh(out / f'mesh_{tag}.obj', *mesh, net, state.z)
            if 'splats' in formats:
                write_splt(out / f'splats_{tag}.splt', transform_gaussians(splats, net, state.z))
            log.info('frame %d  t=%.4g', state.frame, state.t)
    return EXIT_OK


def cmd_volume(args):
    scene = parse_scene(args.scene)
    vol, err = estimate_volume(_field(scene), args.samples, rng_seed=args.seed)
    print(f'volume {vol:.8g} +/- {err:.3g} ({args.samples} samples)')
    return EXIT_OK


def cmd_weights_grid(args):
    net = load_checkpoint(args.weights)
    if args.scene is not None:
        field_ = _field(parse_scene(args.scene))
        bbox = (field_.bbox_lo, field_.bbox_hi)
    else:
        # the checkpoint only knows the normalization sphere; use its cube
        c = np.asarray(net.input_center)
        bbox = (c - net.input_scale, c + net.input_scale)
    paths = export_weight_grid(net, bbox, args.res, args.out)
    log.info('wrote %d grids to %s', len(paths), args.out)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog='simplicits', description=__doc__.split('\n\n')[0])
    parser.add_argument('-v', '--verbose', action='store_true', help='log progress to stderr')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='fit skinning weights for a scene')
    p.add_argument('--scene', required=True)
    p.add_argument('--out', required=True, help='checkpoint path (.swgt)')
    p.add_argument('--seed', type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('simulate', help='run the reduced simulation')
    p.add_argument('--scene', required=True)
    p.add_argument('--weights', required=True)
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--frames', type=int, default=None)
    p.add_argument('--stride', type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('volume', help='Monte-Carlo volume of the scene geometry')
    p.add_argument('--scene', required=True)
    p.add_argument('--samples', type=int, default=1_000_000)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_volume)

    p = sub.add_parser('weights-grid', help='sample trained weights on a grid (SVOL)')
    p.add_argument('--weights', required=True)
    p.add_argument('--res', type=int, required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--scene', default=None, help='take the grid bounds from this scene')
    p.set_defaults(func=cmd_weights_grid)
    return parser


def _thread_limit():
    value = os.environ.get('SIMPLICITS_THREADS')
    if not value:
        return nullcontext()
    try:
        limit = int(value)
    except ValueError:
        raise UsageError(f'SIMPLICITS_THREADS must be an integer, got {value!r}') from None
    if limit < 1:
        raise UsageError('SIMPLICITS_THREADS must be >= 1')
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(levelname)s %(message)s')
    try:
        with _thread_limit():
            return args.func(args)
    except (InfeasibleState, UsageError, SceneError, OccupancyError, CheckpointError,
            SplatError, OSError) as exc:
        print(f'simplicits: error: {exc}', file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, TrainingError, SimulationError, LinAlgError,
            FloatingPointError) as exc:
        print(f'simplicits: numerical failure: {exc}', file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f'simplicits: error: {exc}', file=sys.stderr)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
