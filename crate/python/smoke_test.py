"""Drag one end of a small bar and render it through the Python bindings."""

import json
import os
import struct
import sys
import tempfile

import morphkit


def write_bar(path, length=6.0, step=0.25):
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    rows = []
    for k in range(int(length / step) + 1):
        x = k * step
        for dy, dz in [(0, 0), (0.2, 0), (-0.2, 0), (0, 0.2), (0, -0.2)]:
            rows.append([x, dy, dz, 0.5, 0.2, -0.3, 2.0, -2.0, -2.0, -2.0, 1, 0, 0, 0])
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(rows)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        for row in rows:
            f.write(struct.pack(f"<{len(names)}f", *row))
    return len(rows)


def main():
    with tempfile.TemporaryDirectory() as tmp:
        ply = os.path.join(tmp, "bar.ply")
        count = write_bar(ply)

        cloud = morphkit.Cloud.load(ply)
        assert len(cloud) == count
        graph = morphkit.build_graph(cloud, node_count=32)
        assert graph.node_count == 32
        assert json.loads(graph.to_json())["node_count"] == 32

        rest = graph.positions()
        tip = max(range(len(rest)), key=lambda k: rest[k][0])
        root = min(range(len(rest)), key=lambda k: rest[k][0])
        handles = [(root, rest[root]), (tip, [rest[tip][0] - 1.0, 2.0, 0.0])]
        positions, energy = morphkit.solve(graph, handles)
        assert positions[tip] == handles[1][1]
        _, lap_energy = morphkit.solve(graph, handles, mode="laplacian")
        assert lap_energy >= energy

        session = morphkit.Session(ply, node_count=32)
        session.set_handles([(root, rest[root])])
        preview = session.drag(tip, [rest[tip][0] - 1.0, 2.0, 0.0])
        assert len(preview["positions"]) == 32
        camera = json.dumps({"position": [3, 1, -12], "rotation": [1, 0, 0, 0],
                             "fov_y": 0.8, "width": 64, "height": 48})
        png = session.render(camera, os.path.join(tmp, "frame.png"))
        assert os.path.getsize(png) > 0
        out = session.export(os.path.join(tmp, "deformed.ply"))
        assert len(morphkit.Cloud.load(out)) == count

        try:
            morphkit.Cloud.load(os.path.join(tmp, "missing.ply"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file should raise")
    print("smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
