"""Independent numpy reference for the forward pass, contexts, interaction schema and MLP.

Writes ../fixtures/forward_cases.json. Parameters are named with the model document
convention so the Rust side can load them by name.
"""

import json
import pathlib

import numpy as np

EPS = 1e-5
VARIANTS = {
    "differentiable_adaptive": ("adaptive", "hybrid"),
    "gated_attention": ("sigmoid", "hybrid"),
    "tanh_polarity": ("tanh", "hybrid"),
    "sinusoidal_only": ("adaptive", "sin"),
    "polynomial_only": ("adaptive", "poly"),
    "open_interaction": ("adaptive", "open"),
}


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def committee(k):
    rest = k - 1
    n_poly = (rest + 1) // 2
    return ["linear"] + ["polynomial"] * n_poly + ["sinusoid"] * (rest - n_poly)


def random_model(rng, n, degree, heads, gate, node):
    names, values = [], []
    nodes, head_params = [], []

    def vec(name, size):
        vals = rng.uniform(-1.5, 1.5, size)
        names.extend(f"{name}.{k}" for k in range(size))
        values.extend(float(v) for v in vals)
        return vals

    def scalar(name):
        v = float(rng.uniform(-1.5, 1.5))
        names.append(name)
        values.append(v)
        return v

    for i in range(n):
        p = f"node.{i}"
        spec = {}
        if node == "open":
            spec["v_lin"] = vec(f"{p}.v_lin", n - 1)
            spec["b_lin"] = scalar(f"{p}.b_lin")
        else:
            if node in ("hybrid", "poly"):
                spec["v_poly"] = vec(f"{p}.v_poly", n - 1)
                spec["b_poly"] = scalar(f"{p}.b_poly")
                spec["coeff"] = vec(f"{p}.coeff", degree + 1)
            if node in ("hybrid", "sin"):
                spec["v_sin"] = vec(f"{p}.v_sin", n - 1)
                spec["amplitude"] = scalar(f"{p}.amplitude")
                spec["frequency"] = scalar(f"{p}.frequency")
                spec["phase"] = scalar(f"{p}.phase")
            channels = 2 if node == "hybrid" else 1
            spec["gate_w"] = vec(f"{p}.gate_w", channels)
            if gate == "adaptive":
                spec["gate_p"] = vec(f"{p}.gate_p", 2)
        nodes.append(spec)
    for j, kind in enumerate(committee(heads)):
        p = f"head.{j}"
        h = {"kind": kind, "w": vec(f"{p}.w", 2 * n)}
        if kind in ("linear", "polynomial"):
            h["bias"] = scalar(f"{p}.bias")
        if kind == "polynomial":
            h["coeff"] = vec(f"{p}.coeff", degree + 1)
        if kind == "sinusoid":
            h["amplitude"] = scalar(f"{p}.amplitude")
            h["frequency"] = scalar(f"{p}.frequency")
            h["phase"] = scalar(f"{p}.phase")
        head_params.append(h)
    return names, values, nodes, head_params


def poly(coeff, s):
    return sum(c * s**k for k, c in enumerate(coeff))


def context(spec, gate, xm):
    if "v_lin" in spec:
        return spec["v_lin"] @ xm + spec["b_lin"]
    h = []
    if "v_poly" in spec:
        h.append(poly(spec["coeff"], spec["v_poly"] @ xm + spec["b_poly"]))
    if "v_sin" in spec:
        h.append(spec["amplitude"] * np.sin(spec["frequency"] * (spec["v_sin"] @ xm) + spec["phase"]))
    h = np.array(h)
    if len(h) == 2:
        h = (h - h.mean()) / np.sqrt(h.var() + EPS)
    g = spec["gate_w"] @ h
    if gate == "sigmoid":
        return sigmoid(g)
    if gate == "tanh":
        return np.tanh(g)
    a = np.exp(spec["gate_p"] - spec["gate_p"].max())
    a /= a.sum()
    return a[0] * sigmoid(g) + a[1] * np.tanh(g)


def forward(nodes, heads, gate, x):
    n = len(x)
    z = np.array([context(nodes[i], gate, np.delete(x, i)) for i in range(n)])
    u = np.concatenate([x, z])
    y = 0.0
    for h in heads:
        s = h["w"] @ u
        if h["kind"] == "linear":
            y += s + h["bias"]
        elif h["kind"] == "polynomial":
            y += poly(h["coeff"], s + h["bias"])
        else:
            y += h["amplitude"] * np.sin(h["frequency"] * s + h["phase"])
    return y, z


def schema(nodes, n):
    m = np.zeros((n, n))
    for i, spec in enumerate(nodes):
        if "v_lin" in spec:
            w = np.abs(spec["v_lin"])
        else:
            w = np.zeros(n - 1)
            c = 0
            for key in ("v_poly", "v_sin"):
                if key in spec:
                    w += abs(spec["gate_w"][c]) * np.abs(spec[key])
                    c += 1
        cols = [k for k in range(n) if k != i]
        m[i, cols] = w / w.sum()
    return m


def mlp_case(rng, n):
    names, values, layers = [], [], []
    prev = n
    for l, width in enumerate([32, 16, 1]):
        w = rng.uniform(-0.6, 0.6, (width, prev))
        b = rng.uniform(-0.3, 0.3, width)
        for o in range(width):
            names += [f"mlp.{l}.w.{o}.{k}" for k in range(prev)]
            values += [float(v) for v in w[o]]
        names += [f"mlp.{l}.b.{o}" for o in range(width)]
        values += [float(v) for v in b]
        layers.append((w, b))
        prev = width
    xs = rng.normal(size=(4, n))
    ys = []
    for x in xs:
        a = x
        for l, (w, b) in enumerate(layers):
            a = w @ a + b
            if l < len(layers) - 1:
                a = np.maximum(a, 0.0)
        ys.append(float(a[0]))
    return {"n_features": n, "param_names": names, "params": values, "inputs": xs.tolist(), "outputs": ys}


def main():
    rng = np.random.default_rng(20240611)
    cases = []
    for variant, (gate, node) in VARIANTS.items():
        for n, degree, heads in [(2, 1, 2), (3, 2, 4), (5, 2, 4), (4, 3, 7), (6, 2, 18)]:
            names, values, nodes, head_params = random_model(rng, n, degree, heads, gate, node)
            xs = rng.normal(size=(3, n))
            outs = [forward(nodes, head_params, gate, x) for x in xs]
            cases.append({
                "variant": variant,
                "n_features": n,
                "degree": degree,
                "heads": heads,
                "param_names": names,
                "params": values,
                "inputs": xs.tolist(),
                "outputs": [float(y) for y, _ in outs],
                "contexts": [z.tolist() for _, z in outs],
                "schema": schema(nodes, n).tolist(),
            })
    mlp = [mlp_case(rng, n) for n in (1, 3, 10)]
    out = pathlib.Path(__file__).resolve().parent.parent / "fixtures" / "forward_cases.json"
    out.write_text(json.dumps({"models": cases, "mlp": mlp}, indent=1) + "\n")


if __name__ == "__main__":
    main()
