"""A full secret-shared CNN inference, end to end.

Builds the bundled reference model, deals shares of the weights and one
input to three simulated parties, runs the whole schedule (convolutions,
truncations, masked relu/maxpool, dense layers), and checks the decoded
logits against the plaintext integer reference. The comparison is exact:
the protocol computes the same integers, just without any single party
seeing them.
"""

import numpy as np

from ssnet.engine import simulate_inference
from ssnet.field import PrimeField
from ssnet.model import build_reference_model, plaintext_infer, random_input
from ssnet.protocol import audit_violations
from ssnet.sss import SssScheme


def main():
    model, _ = build_reference_model(seed=7, pool="max")
    params = sum(int(np.prod(qt.values.shape))
                 for qt in model.weights.values())
    print(f"model {model.name}: input {model.input_shape},"
          f" {len(model.layers)} layers, {params} parameters")

    x, _ = random_input(7, model)
    scheme = SssScheme(PrimeField(), 2, 3)
    result = simulate_inference(model, scheme, seed=7, input_int=x,
                                audit=True)

    print("\ndecoded logits:", result.output.tolist())
    print("argmax:", int(result.output.argmax()))
    want = plaintext_infer(model, x)
    print("matches plaintext reference:",
          bool(np.all(result.output == want)))

    problems = audit_violations(result.audit_logs, scheme.k)
    print("audit violations:", problems if problems else "none")

    rows = result.metrics.summary()
    online = sum(r["elements_sent"] for r in rows if r["op"] != "offline")
    print(f"online traffic: {online} field elements"
          f" ({online * 8} bytes) in {max(r['rounds'] for r in rows)}"
          " rounds at the widest op")


if __name__ == "__main__":
    main()
