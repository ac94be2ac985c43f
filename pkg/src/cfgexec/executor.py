"""Neural control-flow executor: program states, Gumbel-softmax branch agent,
adjacency gating, and the state-transition cell whose fixed point the solver
finds.

One transition is: program state from the node matrix, an agent sample over
the nodes, a gated adjacency, then one message-passing step with the encoder
features injected. `JointStep` packages the composite map with its
vector-Jacobian products for the implicit backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .nn import ACTIVATIONS, NumericError, sigmoid


@dataclass
class AgentConfig:
    """Branching agent settings.

    mode "hard" applies a one-hot straight-through sample; "soft" applies the
    relaxed probabilities directly. tau is the Gumbel-softmax temperature.
    gate_axis "recv" scales columns of the adjacency (the agent picks which
    nodes receive flow); "send" scales rows. successor_mask restricts the
    episodic agent to successors of the previously selected node.
    """

    mode: str = "soft"
    tau: float = 16.0
    successor_mask: bool = False
    max_steps: int = 50
    gate_axis: str = "recv"

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"mode must be 'hard' or 'soft', got {self.mode!r}")
        if self.gate_axis not in ("recv", "send"):
            raise ValueError(f"gate_axis must be 'recv' or 'send', got {self.gate_axis!r}")


@dataclass
class ExecutionState:
    """Snapshot of one transition step."""

    X: np.ndarray
    s: np.ndarray
    z: np.ndarray
    a: np.ndarray
    A_gated: np.ndarray
    step: int
    residual: float = np.inf

    def __post_init__(self) -> None:
        total = float(self.z.sum())
        if abs(total - 1.0) > 1e-6:
            raise NumericError(f"agent probabilities sum to {total}, expected 1")

    @property
    def selected(self) -> int:
        return int(np.argmax(self.a))


STATE_FLOOR = 1e-6  # keeps log(s) and the 1/s gradient term finite under f32


def program_state(x: np.ndarray, w_s: np.ndarray) -> np.ndarray:
    """Per-node scalar program state: sigmoid of a linear read-out of X.

    Clamped away from exact zero: the sigmoid guarantees s > 0 only in exact
    arithmetic, and the agent's backward divides by s.
    """
    s = sigmoid((x @ w_s).reshape(-1))
    return np.clip(s, STATE_FLOOR, 1.0)


def gumbel_softmax(s: np.ndarray, noise: np.ndarray, tau: float,
                   allowed: np.ndarray | None = None) -> np.ndarray:
    """Relaxed categorical sample z = softmax((log s + g) / tau).

    `noise` holds standard Gumbel draws. `allowed` optionally masks the
    categories (disallowed entries get -inf logits before the softmax).
    """
    logits = (np.log(s) + noise) / tau
    if allowed is not None:
        logits = np.where(allowed, logits, -np.inf)
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def one_hot(index: int, n: int, dtype: np.dtype) -> np.ndarray:
    a = np.zeros(n, dtype=dtype)
    a[index] = 1.0
    return a


def gumbel_sample(s: np.ndarray, tau: float, rng: np.random.Generator,
                  hard: bool, allowed: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Draw Gumbel noise from rng and return (z, applied agent a).

    Hard mode returns a one-hot a at argmax z; its gradient path is taken
    through z (straight-through), which `JointStep.vjp` implements by routing
    da into dz unchanged.
    """
    noise = rng.gumbel(size=s.shape).astype(s.dtype)
    z = gumbel_softmax(s, noise, tau, allowed)
    a = one_hot(int(np.argmax(z)), z.shape[0], z.dtype) if hard else z
    return z, a


def gate_adjacency(a_hat: np.ndarray, a: np.ndarray, gate_axis: str = "recv") -> np.ndarray:
    """Scale the renormalized adjacency by the agent vector.

    "recv": column j is scaled by a_j, so flow only enters selected nodes.
    "send": row i is scaled by a_i (ablation switch).
    """
    if gate_axis == "recv":
        return a_hat * a[None, :]
    if gate_axis == "send":
        return a_hat * a[:, None]
    raise ValueError(f"unknown gate_axis {gate_axis!r}")


def deq_cell(x: np.ndarray, u: np.ndarray, w: np.ndarray, omega: np.ndarray,
             bias: np.ndarray, a_tilde: np.ndarray, phi: str = "tanh") -> np.ndarray:
    """One transition: X' = phi(A~^T X W + U Omega + bias)."""
    act = ACTIVATIONS[phi][0]
    out = act((a_tilde.T @ x) @ w + u @ omega + bias[None, :])
    if not np.isfinite(out).all():
        raise NumericError("nan-detected: non-finite transition output")
    return out


def check_termination(state: ExecutionState, exits: frozenset[int] | set[int],
                      tol: float, max_steps: int, hard: bool = True) -> str | None:
    """Return a stop reason or None to continue.

    Stops on "exit-reached" when a hard agent selected an exit node, on
    "equilibrium" when the relative residual fell below tol, and on
    "max-steps" at the step budget.
    """
    if hard and state.selected in exits:
        return "exit-reached"
    if state.residual < tol:
        return "equilibrium"
    if state.step >= max_steps:
        return "max-steps"
    return None


@dataclass
class StepCache:
    """Forward values of one composite transition, kept for its VJP."""

    x: np.ndarray
    s: np.ndarray
    z: np.ndarray
    a: np.ndarray
    q: np.ndarray
    m_pre: np.ndarray
    x_next: np.ndarray


@dataclass
class JointStep:
    """The composite map X -> phi(gate(agent(X)) message passing + U Omega + b).

    Gumbel noise is a fixed vector for the lifetime of the step object, which
    makes the map deterministic and its fixed point well-defined; the
    episodic runner in `run_execution` draws fresh noise per step instead.
    """

    a_hat: np.ndarray
    u: np.ndarray
    w_s: np.ndarray
    w: np.ndarray
    omega: np.ndarray
    bias: np.ndarray
    noise: np.ndarray
    tau: float
    hard: bool = False
    phi: str = "tanh"
    gate_axis: str = "recv"

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, StepCache]:
        s = program_state(x, self.w_s)
        z = gumbel_softmax(s, self.noise, self.tau)
        a = one_hot(int(np.argmax(z)), z.shape[0], z.dtype) if self.hard else z
        if self.gate_axis == "recv":
            q = self.a_hat.T @ x
            gated = a[:, None] * q
        else:
            q = self.a_hat.T @ (a[:, None] * x)
            gated = q
        m_pre = gated @ self.w + self.u @ self.omega + self.bias[None, :]
        x_next = ACTIVATIONS[self.phi][0](m_pre)
        if not np.isfinite(x_next).all():
            raise NumericError("nan-detected: non-finite transition output")
        return x_next, StepCache(x, s, z, a, q, m_pre, x_next)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def _d_m(self, cache: StepCache, v: np.ndarray) -> np.ndarray:
        dphi = ACTIVATIONS[self.phi][1](cache.x_next, cache.m_pre)
        return v * dphi

    def _agent_dx(self, cache: StepCache, da: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Backprop the agent path: da -> (dX contribution, dW_s)."""
        dz = da  # soft agent is identity; hard agent is straight-through
        dlogits = cache.z * (dz - float(dz @ cache.z))
        ds = dlogits / (self.tau * cache.s)
        dpre = ds * cache.s * (1.0 - cache.s)
        dx = dpre[:, None] @ self.w_s.reshape(1, -1)
        dw_s = (cache.x.T @ dpre).reshape(self.w_s.shape)
        return dx, dw_s

    def vjp_x(self, cache: StepCache, v: np.ndarray) -> np.ndarray:
        """(dF/dX)^T v at the cached point, including the agent path."""
        dm = self._d_m(cache, v)
        dgated = dm @ self.w.T
        if self.gate_axis == "recv":
            dq = cache.a[:, None] * dgated
            da = (dgated * cache.q).sum(axis=1)
            dx = self.a_hat @ dq
        else:
            dax = self.a_hat @ dgated
            da = (dax * cache.x).sum(axis=1)
            dx = cache.a[:, None] * dax
        dx_agent, _ = self._agent_dx(cache, da)
        return dx + dx_agent

    def vjp_params(self, cache: StepCache, v: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of <v, F(X)> with respect to the step's parameters and U."""
        dm = self._d_m(cache, v)
        if self.gate_axis == "recv":
            gated = cache.a[:, None] * cache.q
        else:
            gated = cache.q
        dw = gated.T @ dm
        dgated = dm @ self.w.T
        if self.gate_axis == "recv":
            da = (dgated * cache.q).sum(axis=1)
        else:
            dax = self.a_hat @ dgated
            da = (dax * cache.x).sum(axis=1)
        _, dw_s = self._agent_dx(cache, da)
        return {
            "W": dw,
            "Om": self.u.T @ dm,
            "cb": dm.sum(axis=0),
            "ws": dw_s,
            "U": dm @ self.omega.T,
        }


def run_execution(a_hat: np.ndarray, u: np.ndarray, params: Mapping[str, np.ndarray],
                  agent: AgentConfig, exits: frozenset[int] | set[int],
                  tol: float, seed: int) -> tuple[ExecutionState, list[dict]]:
    """Episodic execution with fresh Gumbel noise per step.

    This is the simulation view used for trace export: the agent walks the
    graph one step at a time until an exit is selected, the state stops
    changing, or the step budget runs out. Returns the final state and a
    trace of {"selected", "residual"} records.
    """
    rng = np.random.default_rng(seed)
    n = a_hat.shape[0]
    x = u.copy()
    prev_selected: int | None = None
    trace: list[dict] = []
    state = None
    for step in range(1, agent.max_steps + 1):
        s = program_state(x, params["ws"])
        allowed = None
        if agent.successor_mask and prev_selected is not None:
            allowed = a_hat[prev_selected] > 0
        z, a = gumbel_sample(s, agent.tau, rng, agent.mode == "hard", allowed)
        gated = gate_adjacency(a_hat, a, agent.gate_axis)
        x_next = deq_cell(x, u, params["W"], params["Om"], params["cb"], gated)
        residual = float(np.linalg.norm(x_next - x) / (np.linalg.norm(x) + 1e-12))
        state = ExecutionState(X=x_next, s=s, z=z, a=a, A_gated=gated, step=step,
                               residual=residual)
        trace.append({"selected": state.selected, "residual": residual})
        reason = check_termination(state, exits, tol, agent.max_steps,
                                   hard=agent.mode == "hard")
        if reason is not None:
            trace[-1]["stop"] = reason
            break
        x = x_next
        prev_selected = state.selected
    return state, trace
