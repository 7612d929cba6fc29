"""Voxelized permanent-magnet Larmor spin-rotator design and neutron spin simulation."""
from .geometry import (Cuboid, DesignGrid, FieldBox, GeometryError, Half, HalbachLayout,
                       MagnetAssembly, RingSector, Vec3, VoxelMagnet, apply_gap, build_design_grid,
                       build_field_box, build_halbach, halbach_directions, voxelize_primitive)
from .kernels import BACKEND
from .magnetostatics import (FieldError, FieldSampleSet, RectCoil, assembly_field, coil_field,
                             cuboid_field, field_on_samples, helmholtz_pair, write_field_map)
from .metrics import (ActionReport, action, field_energy, functional_j, relative_error, report,
                      rotation_angle)
from .neutron import (Interferogram, NeutronError, Ray, Spinor, beam_dephasing, fit_sinusoid,
                      interferogram_closed_form, interferogram_oracle, polarimeter_scan,
                      ray_rotation_angle, spin_contrast, su2_propagate)
from .optimize import (DesignResult, OptimizationError, OptimizeConfig, calibrate_gap,
                       calibrate_remanence, optimize_directions, optimize_topology, scan)

__version__ = "0.1.0"
