"""Regenerate the 50-row audit fixture and its golden table.

The golden values come from the brute-force references in ``oracles.py``,
never from the library under test. Run from the repository root:

    python3 tests/fixtures/make_audit_fixture.py
"""

import json
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))
import oracles  # noqa: E402


def main():
    rng = np.random.default_rng(2024)
    scores, group, label = oracles.tie_instance(rng, 50)
    lines = ["sample_id,group,label,score_0,score_1,score_2"]
    for i in range(50):
        lines.append(",".join([str(i), str(group[i]), str(label[i])] + [repr(float(x)) for x in scores[i]]))
    (HERE / "audit50.csv").write_text("\n".join(lines) + "\n")
    golden = oracles.metric_table(scores, group, label)
    (HERE / "audit50_golden.json").write_text(json.dumps(golden, indent=2) + "\n")


if __name__ == "__main__":
    main()
