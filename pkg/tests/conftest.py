import numpy as np
import pytest

from longisurf import TriangleMesh, icosphere


@pytest.fixture
def tetrahedron():
    verts = np.array(
        [
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ]
    )
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriangleMesh(verts, faces)


@pytest.fixture
def single_triangle():
    return TriangleMesh(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]]
    )


@pytest.fixture(scope="session")
def ico_cache():
    cache = {}

    def get(level, radius=1.0):
        key = (level, float(radius))
        if key not in cache:
            cache[key] = icosphere(level, radius)
        return cache[key]

    return get


def cube_mesh():
    """Cube [-1,1]^3 triangulated so that every face diagonal runs through
    a main-diagonal corner; corner (1,1,1) then touches six triangles of
    equal area, two on each adjacent cube face."""
    corners = np.array(
        [
            [-1, -1, -1],  # 0
            [1, -1, -1],  # 1
            [1, 1, -1],  # 2
            [-1, 1, -1],  # 3
            [-1, -1, 1],  # 4
            [1, -1, 1],  # 5
            [1, 1, 1],  # 6
            [-1, 1, 1],  # 7
        ],
        dtype=float,
    )
    # each quad split along the diagonal touching vertex 6 or vertex 0
    quads = [
        (0, 1, 2, 3),  # z = -1 (contains 0 and 2)
        (4, 7, 6, 5),  # z = +1 (contains 6)
        (0, 4, 5, 1),  # y = -1
        (2, 6, 7, 3),  # y = +1 (contains 6)
        (0, 3, 7, 4),  # x = -1
        (1, 5, 6, 2),  # x = +1 (contains 6)
    ]
    faces = []
    for a, b, c, d in quads:
        if 6 in (a, b, c, d):
            # rotate so the shared diagonal passes through vertex 6
            quad = [a, b, c, d]
            while quad[0] != 6:
                quad = quad[1:] + quad[:1]
            a, b, c, d = quad
        faces.append([a, b, c])
        faces.append([a, c, d])
    mesh = TriangleMesh(corners, np.array(faces))
    from longisurf import validate

    if validate(mesh).signed_volume < 0:
        mesh = TriangleMesh(corners, np.array(faces)[:, ::-1])
    return mesh
