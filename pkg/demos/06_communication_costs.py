"""What the protocol costs on the wire, predicted and measured.

Every operation has a closed-form element count, so the planner can
price a schedule before anything runs. The simulator meters actual
sends per operation; the two always agree. Going from 3 parties to 5
raises the per-layer cost by 35/16, about 2.2x.
"""

from ssnet.engine import estimate_report, simulate_inference
from ssnet.field import PrimeField
from ssnet.layers import full_layer_formula
from ssnet.model import build_reference_model, random_input
from ssnet.sss import SssScheme


def main():
    model, _ = build_reference_model(seed=7, pool="max")
    x, _ = random_input(7, model)
    totals = {}
    for k, n in ((2, 3), (3, 5)):
        scheme = SssScheme(PrimeField(), k, n)
        rows = estimate_report(model, scheme)
        print(f"\nscheme ({k},{n})")
        print(f"{'op':<10}{'kind':<12}{'elements':>10}{'rounds':>8}")
        estimate = 0
        for row in rows:
            print(f"{row['name']:<10}{row['kind']:<12}"
                  f"{row['elements']:>10}{row['rounds']:>8}")
            if row["kind"] != "offline":
                estimate += row["elements"]
        result = simulate_inference(model, scheme, seed=7, input_int=x)
        measured = result.metrics.total_elements()
        verdict = "match" if measured == estimate else "MISMATCH"
        print(f"estimated {estimate}, measured {measured}  ({verdict})")
        totals[k] = measured

    print(f"\nmeasured 5-party/3-party ratio: {totals[3] / totals[2]:.4f}")
    print(f"per full layer (linear+truncation+nonlinear) the closed form"
          f" gives {full_layer_formula(3)}/{full_layer_formula(2)}"
          f" = {full_layer_formula(3) / full_layer_formula(2):.4f}")


if __name__ == "__main__":
    main()
