"""Stand-in compiler for tree-search tests.

Usage: fake_cc.py SOURCE -o BINARY

Rejects any source carrying an interchange pragma (exit 1), like a compiler
refusing a transformation it cannot prove legal.  Otherwise writes BINARY as
a Python script printing a synthetic runtime: tiling the two outer loops
with size 4 is the fastest stack, parallelization and deeper stacks cost a
little.
"""

import re
import sys


def cost(pragmas):
    t = 1.0
    for p in pragmas:
        m = re.search(r"loop\(([^)]*)\) tile sizes\(([^)]*)\)", p)
        if m:
            loops = m.group(1).split(",")
            sizes = [int(s) for s in m.group(2).split(",")]
            if loops == ["i", "j"]:
                t -= 0.3 if sizes == [4, 4] else 0.2
            elif len(loops) == 1 and loops[0] in ("i", "j"):
                t -= 0.1
            else:
                t += 0.05
        elif "parallelize_thread" in p:
            t += 0.02
    return t + 0.01 * len(pragmas)


def main(argv):
    source, binary = argv[1], argv[argv.index("-o") + 1]
    pragmas = [
        line.strip()
        for line in open(source)
        if line.strip().startswith("#pragma clang loop(")
    ]
    if any("interchange" in p for p in pragmas):
        print("error: transformation would violate dependences", file=sys.stderr)
        return 1
    with open(binary, "w") as fh:
        fh.write(f"print({cost(pragmas)!r})\n")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
