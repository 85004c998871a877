"""VTU (XML unstructured grid) snapshot writer, binary appended format.

Fields are sampled per vertex by averaging the element polynomials of all
incident elements, which is the usual way to hand discontinuous data to
visualization tools.
"""

from __future__ import annotations

import struct

import numpy as np

from .space import FeSpace, PairField, element_basis

__all__ = ["vertex_averages", "write_vtu"]

_VTK_TRIANGLE = 5


def vertex_averages(space: FeSpace, field: PairField) -> np.ndarray:
    """Element-part values averaged over the elements incident to each vertex."""
    mesh = space.mesh
    ref_corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    vals, _ = element_basis(space.k, ref_corners)        # (mE, 3)
    corner_vals = (field.elem_coeffs @ vals) / space.sqrt_area[:, None]
    acc = np.zeros(mesh.n_vertices)
    cnt = np.zeros(mesh.n_vertices)
    np.add.at(acc, mesh.elements.ravel(), corner_vals.ravel())
    np.add.at(cnt, mesh.elements.ravel(), 1.0)
    return acc / np.maximum(cnt, 1.0)


def write_vtu(path, space: FeSpace, fields: dict[str, PairField]) -> None:
    """Write per-vertex sampled fields on the triangulation.

    ``fields`` maps data array names to pair fields; the first name becomes
    the active scalar.
    """
    mesh = space.mesh
    nv, ne = mesh.n_vertices, mesh.n_elements

    blocks: list[bytes] = []
    offsets: list[int] = []

    def add_block(arr: np.ndarray) -> int:
        raw = arr.tobytes()
        offsets.append(sum(8 + len(b) for b in blocks))
        blocks.append(struct.pack("<Q", len(raw)) + raw)
        return offsets[-1]

    names = list(fields)
    data_off = [add_block(vertex_averages(space, fields[n]).astype("<f8"))
                for n in names]
    pts = np.zeros((nv, 3))
    pts[:, :2] = mesh.vertices
    pts_off = add_block(pts.astype("<f8"))
    conn_off = add_block(mesh.elements.astype("<i8"))
    offs_off = add_block((3 * np.arange(1, ne + 1)).astype("<i8"))
    type_off = add_block(np.full(ne, _VTK_TRIANGLE, dtype="u1"))

    lines = [
        '<?xml version="1.0"?>',
        '<VTKFile type="UnstructuredGrid" version="1.0" '
        'byte_order="LittleEndian" header_type="UInt64">',
        "  <UnstructuredGrid>",
        f'    <Piece NumberOfPoints="{nv}" NumberOfCells="{ne}">',
        f'      <PointData Scalars="{names[0]}">' if names else "      <PointData>",
    ]
    for name, off in zip(names, data_off):
        lines.append(f'        <DataArray type="Float64" Name="{name}" '
                     f'format="appended" offset="{off}"/>')
    lines += [
        "      </PointData>",
        "      <Points>",
        f'        <DataArray type="Float64" NumberOfComponents="3" '
        f'format="appended" offset="{pts_off}"/>',
        "      </Points>",
        "      <Cells>",
        f'        <DataArray type="Int64" Name="connectivity" '
        f'format="appended" offset="{conn_off}"/>',
        f'        <DataArray type="Int64" Name="offsets" '
        f'format="appended" offset="{offs_off}"/>',
        f'        <DataArray type="UInt8" Name="types" '
        f'format="appended" offset="{type_off}"/>',
        "      </Cells>",
        "    </Piece>",
        "  </UnstructuredGrid>",
        '  <AppendedData encoding="raw">',
    ]
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode())
        fh.write(b"\n    _")
        for b in blocks:
            fh.write(b)
        fh.write(b"\n  </AppendedData>\n</VTKFile>\n")
