"""Print the enumerated true rNDE for each data-generating configuration."""

import itertools

from bdfusion.simulation import DeltaFlags, GenerativeCoefficients, true_rnde

if __name__ == "__main__":
    coef = GenerativeCoefficients()
    for ua, yam in itertools.product([True, False], repeat=2):
        print(f"UA={ua!s:5} AM={yam!s:5} rNDE={true_rnde(coef, DeltaFlags(ua=ua, yam=yam)):.8f}")
