"""Built-in benchmark systems and the external-system plugin protocol.

External systems run as a child process speaking line-delimited JSON on
stdin/stdout: {"op": "info"} -> {"n":..., "n_u":..., "n_y":...};
{"op": "f", "x": [...], "u": [...]} -> {"dx": [...]};
{"op": "h", "x": [...], "u": [...]} -> {"y": [...]}.
"""

from __future__ import annotations

import json
import subprocess

import numpy as np

from .dynamics import NonlinearSystem

__all__ = ["SystemBundle", "pendulum", "vanderpol", "SubprocessSystem",
           "make_system"]


class SystemBundle:
    """A NonlinearSystem plus the structure metadata the pipeline needs."""

    def __init__(self, system: NonlinearSystem, equation_vars: list,
                 labels: tuple):
        self.system = system
        self.equation_vars = equation_vars  # z-bar indices per state equation
        self.labels = labels                # state then input names


def pendulum(gravity: float = 9.81, length: float = 1.0,
             damping: float = 0.2) -> SystemBundle:
    """Damped pendulum: th'' = -(g/L) sin(th) - c th' + u."""
    glr = gravity / length

    def f(x, u):
        return np.array([x[1], -glr * np.sin(x[0]) - damping * x[1] + u[0]])

    def jac_f(x, u):
        a = np.array([[0.0, 1.0], [-glr * np.cos(x[0]), -damping]])
        b = np.array([[0.0], [1.0]])
        return a, b

    sys = NonlinearSystem(2, 1, f, jac_f=jac_f, name="pendulum")
    return SystemBundle(sys, [(1,), (0, 1, 2)], ("theta", "omega", "torque"))


def vanderpol(mu: float = 1.0) -> SystemBundle:
    """Van der Pol oscillator with input: x2' = mu (1 - x1^2) x2 - x1 + u."""

    def f(x, u):
        return np.array([x[1], mu * (1.0 - x[0] ** 2) * x[1] - x[0] + u[0]])

    def jac_f(x, u):
        a = np.array([
            [0.0, 1.0],
            [-2.0 * mu * x[0] * x[1] - 1.0, mu * (1.0 - x[0] ** 2)],
        ])
        b = np.array([[0.0], [1.0]])
        return a, b

    sys = NonlinearSystem(2, 1, f, jac_f=jac_f, name="vanderpol")
    return SystemBundle(sys, [(1,), (0, 1, 2)], ("x1", "x2", "u"))


class SubprocessSystem:
    """Client for the line-delimited JSON plugin protocol.

    The child process is spawned from `command` (list of argv strings); each
    request is one JSON line, each reply one JSON line.
    """

    def __init__(self, command):
        self.command = list(command)
        self._proc = subprocess.Popen(
            self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, bufsize=1,
        )
        info = self._request({"op": "info"})
        self.n = int(info["n"])
        self.n_u = int(info["n_u"])
        self.n_y = int(info.get("n_y", self.n))
        self.equation_vars = [tuple(v) for v in info.get(
            "equation_vars", [tuple(range(self.n + self.n_u))] * self.n)]
        self.labels = tuple(info.get(
            "labels", [f"z{i}" for i in range(self.n + self.n_u)]))

    def _request(self, payload: dict) -> dict:
        assert self._proc.stdin and self._proc.stdout
        self._proc.stdin.write(json.dumps(payload) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError("plugin process closed its stdout")
        reply = json.loads(line)
        if "error" in reply:
            raise RuntimeError(f"plugin error: {reply['error']}")
        return reply

    def close(self):
        if self._proc.poll() is None:
            self._proc.terminate()
            self._proc.wait(timeout=5)

    def bundle(self) -> SystemBundle:
        def f(x, u):
            reply = self._request(
                {"op": "f", "x": list(map(float, x)), "u": list(map(float, u))}
            )
            return np.array(reply["dx"], float)

        def h(x, u):
            reply = self._request(
                {"op": "h", "x": list(map(float, x)), "u": list(map(float, u))}
            )
            return np.array(reply["y"], float)

        sys = NonlinearSystem(self.n, self.n_u, f, h=h, n_y=self.n_y,
                              name="plugin")
        return SystemBundle(sys, list(self.equation_vars), self.labels)


def make_system(name: str, params: dict | None = None,
                plugin_command=None):
    """Instantiate a built-in system or a plugin; returns (bundle, closer)."""
    params = params or {}
    if name == "pendulum":
        return pendulum(**params), None
    if name == "vanderpol":
        return vanderpol(**params), None
    if name == "plugin":
        if not plugin_command:
            raise ValueError("plugin system requires a command")
        client = SubprocessSystem(plugin_command)
        return client.bundle(), client.close
    raise ValueError(f"unknown system {name!r} (pendulum|vanderpol|plugin)")
