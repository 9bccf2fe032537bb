"""Short-range molecular dynamics on arbitrary polyhedral meshes.

Pair forces are found through per-cell interaction lists; periodic and
inter-rank halos are supplied by transformed images of whole cells.
"""

from .cost import CostParams, lambert_w_minus1, n_c, nl_lifetime, v_cca, v_ideal, v_n, v_nla
from .engine import Molecules, SimConfig, init_lattice, run_serial
from .forces import PairPotential
from .mesh import Mesh, decompose, dump_mesh, load_mesh
from .meshgen import extruded_polygon_box, hex_box, unit_cube
from .parallel import run_parallel
from .topology import build_topology
from .transforms import TransformPair, compose, rotation_between

__version__ = "0.1.0"

__all__ = [
    "CostParams", "lambert_w_minus1", "n_c", "nl_lifetime", "v_cca", "v_ideal", "v_n", "v_nla",
    "Molecules", "SimConfig", "init_lattice", "run_serial", "PairPotential",
    "Mesh", "decompose", "dump_mesh", "load_mesh", "extruded_polygon_box", "hex_box", "unit_cube",
    "run_parallel", "build_topology", "TransformPair", "compose", "rotation_between",
]
