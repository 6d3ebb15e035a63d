"""Generate the meshes used by the demo sessions (run from this directory)."""

from spechp.meshio import single_quad_mesh, structured_quad_mesh, write_mesh

write_mesh(single_quad_mesh(), "ref_quad.nmj")
write_mesh(structured_quad_mesh(6, 6, x0=-1, y0=-1, x1=1, y1=1), "box.nmj")
write_mesh(structured_quad_mesh(8, 8), "grid8.nmj")
write_mesh(structured_quad_mesh(24, 24, x0=-100, y0=-100, x1=100, y1=100),
           "vortex_grid.nmj")
print("wrote ref_quad.nmj box.nmj grid8.nmj vortex_grid.nmj")
