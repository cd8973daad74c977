"""
Pytest tests for the gradient operator, Poisson integration and adjoint solve.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from core.errors import FactorizationError, NonFiniteInputError
from core.jacobians import (
    adjoint_gradient,
    build_system,
    face_jacobians,
    gradient_operator,
    identity_jacobians,
    solve_positions,
)
from core.mesh import TriMesh, boundary_loops
from core.primitives import grid, rotation_y, sleeveless_shirt


def bumpy_patch(nx=4, ny=5, seed=0):
    """Non-planar grid patch so every face has its own tangent plane."""
    mesh = grid(nx, ny)
    rng = np.random.default_rng(seed)
    v = mesh.vertices.copy()
    v[:, 2] = 0.15 * np.sin(3 * v[:, 0]) * np.cos(2 * v[:, 1]) + 0.01 * rng.normal(size=len(v))
    return mesh.with_vertices(v)


@pytest.fixture(scope="module")
def patch():
    mesh = bumpy_patch()
    op, system = build_system(mesh)
    return mesh, op, system


@pytest.fixture(scope="module")
def shirt():
    mesh = sleeveless_shirt(segments=12, rings=6, arm_rings=(3, 4))
    op, system = build_system(mesh)
    return mesh, op, system


# ── Gradient Operator ─────────────────────────────────────────────────────

class TestGradientOperator:
    """Hat-function gradients reproduce constants and linear functions."""

    def test_constant_has_zero_gradient(self, patch):
        _, op, _ = patch
        np.testing.assert_allclose(op.apply(np.full(op.vertex_count, 3.7)), 0.0, atol=1e-10)

    def test_linear_function_reproduced(self, patch):
        """Tangential part of a is recovered exactly on every face."""
        mesh, op, _ = patch
        a = np.array([0.3, -1.2, 0.5])
        grads = op.apply(mesh.vertices @ a)
        n = mesh.face_normals()
        tangential = a - (n @ a)[:, None] * n
        np.testing.assert_allclose(grads, tangential, atol=1e-8)

    def test_right_triangle(self):
        mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        op = gradient_operator(mesh)
        np.testing.assert_allclose(op.apply(mesh.vertices[:, 0]), [[1.0, 0.0, 0.0]], atol=1e-14)
        assert op.areas[0] == pytest.approx(0.5)

    def test_lmat_matches_dense_assembly(self):
        mesh = grid(10, 10)
        op, system = build_system(mesh)
        G = op.matrix.toarray()
        dense = G.T @ np.diag(op.mass) @ G
        np.testing.assert_allclose(system.lmat.toarray(), dense, atol=1e-10)
        np.testing.assert_allclose(system.lmat.toarray(), system.lmat.toarray().T, atol=1e-12)


# ── Poisson Solve ─────────────────────────────────────────────────────────

class TestSolvePositions:
    """Integrable Jacobian fields are reproduced exactly."""

    def test_identity_returns_rest(self, shirt):
        mesh, op, system = shirt
        positions = solve_positions(system, op, identity_jacobians(mesh.face_count))
        np.testing.assert_allclose(positions, mesh.vertices, atol=1e-8)

    def test_uniform_scale_about_pin(self, shirt):
        mesh, op, system = shirt
        positions = solve_positions(system, op, 2.0 * identity_jacobians(mesh.face_count))
        pin = mesh.vertices[system.pin]
        np.testing.assert_allclose(positions, pin + 2.0 * (mesh.vertices - pin), atol=1e-8)

    def test_global_rotation(self, shirt):
        mesh, op, system = shirt
        R = rotation_y(30.0) @ np.array([[1, 0, 0], [0, np.cos(0.4), -np.sin(0.4)], [0, np.sin(0.4), np.cos(0.4)]])
        positions = solve_positions(system, op, np.tile(R, (mesh.face_count, 1, 1)))
        pin = mesh.vertices[system.pin]
        np.testing.assert_allclose(positions, pin + (mesh.vertices - pin) @ R.T, atol=1e-8)

    def test_pin_never_moves(self, patch):
        mesh, op, system = patch
        rng = np.random.default_rng(1)
        J = identity_jacobians(mesh.face_count) + 0.3 * rng.normal(size=(mesh.face_count, 3, 3))
        positions = solve_positions(system, op, J)
        assert np.array_equal(positions[system.pin], mesh.vertices[system.pin])

    def test_projection_is_idempotent(self, patch):
        mesh, op, system = patch
        rng = np.random.default_rng(2)
        J = identity_jacobians(mesh.face_count) + 0.2 * rng.normal(size=(mesh.face_count, 3, 3))
        first = solve_positions(system, op, J)
        second = solve_positions(system, op, face_jacobians(op, first))
        np.testing.assert_allclose(second, first, atol=1e-8)

    def test_solve_residual(self, patch):
        mesh, op, system = patch
        rng = np.random.default_rng(4)
        rhs = rng.normal(size=(mesh.vertex_count - 1, 3))
        assert system.residual(system.solve_free(rhs), rhs) < 1e-8

    def test_topology_preserved(self, shirt):
        mesh, op, system = shirt
        rng = np.random.default_rng(5)
        J = identity_jacobians(mesh.face_count) + 0.1 * rng.normal(size=(mesh.face_count, 3, 3))
        deformed = mesh.with_vertices(solve_positions(system, op, J))
        assert np.array_equal(deformed.faces, mesh.faces)
        assert boundary_loops(deformed).as_sets() == boundary_loops(mesh).as_sets()

    def test_non_finite_rejected(self, patch):
        mesh, op, system = patch
        J = identity_jacobians(mesh.face_count)
        J[3, 1, 1] = np.nan
        with pytest.raises(NonFiniteInputError):
            solve_positions(system, op, J)

    def test_two_components_fail(self):
        a = grid(2, 2)
        b = a.with_vertices(a.vertices + [5.0, 0.0, 0.0])
        both = TriMesh(np.vstack([a.vertices, b.vertices]), np.vstack([a.faces, b.faces + a.vertex_count]))
        with pytest.raises(FactorizationError):
            build_system(both)


# ── Adjoint ───────────────────────────────────────────────────────────────

class TestAdjoint:
    """Adjoint gradients equal finite differences through the solve."""

    def test_zero_in_zero_out(self, patch):
        mesh, op, system = patch
        assert not np.any(adjoint_gradient(system, op, np.zeros((mesh.vertex_count, 3))))

    def test_linear_in_input(self, patch):
        mesh, op, system = patch
        g = np.random.default_rng(6).normal(size=(mesh.vertex_count, 3))
        np.testing.assert_allclose(
            adjoint_gradient(system, op, 2.0 * g), 2.0 * adjoint_gradient(system, op, g), rtol=1e-12, atol=1e-14
        )

    def test_matches_finite_differences(self):
        mesh = bumpy_patch(nx=2, ny=5, seed=3)
        assert mesh.face_count == 20
        op, system = build_system(mesh)
        rng = np.random.default_rng(7)
        J = identity_jacobians(mesh.face_count) + 0.1 * rng.normal(size=(mesh.face_count, 3, 3))
        target = mesh.vertices + 0.05 * rng.normal(size=mesh.vertices.shape)

        def loss(field):
            return float(np.sum((solve_positions(system, op, field) - target) ** 2))

        grad = adjoint_gradient(system, op, 2.0 * (solve_positions(system, op, J) - target))
        h = 1e-5
        fd = np.zeros_like(J)
        for idx in np.ndindex(*J.shape):
            up, down = J.copy(), J.copy()
            up[idx] += h
            down[idx] -= h
            fd[idx] = (loss(up) - loss(down)) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-8 * np.abs(fd).max())

    def test_inner_product_consistency(self, patch):
        mesh, op, system = patch
        rng = np.random.default_rng(8)
        J = identity_jacobians(mesh.face_count)
        dJ = rng.normal(size=J.shape)
        dV = solve_positions(system, op, J + dJ) - solve_positions(system, op, J)
        dl_dv = rng.normal(size=(mesh.vertex_count, 3))
        lhs = np.sum(adjoint_gradient(system, op, dl_dv) * dJ)
        rhs = np.sum(dl_dv * dV)
        assert lhs == pytest.approx(rhs, rel=1e-8)

    def test_non_finite_rejected(self, patch):
        mesh, op, system = patch
        g = np.zeros((mesh.vertex_count, 3))
        g[0, 0] = np.inf
        with pytest.raises(NonFiniteInputError):
            adjoint_gradient(system, op, g)
