"""Regenerate the bundled demo rule file from the synthetic phrase templates.

Every template becomes one token pattern; single-token slot values turn
into alternations, multi-token values are expanded into separate rules.
"""
import itertools
import re
import sys
from pathlib import Path

from echolab.synth import expand_slot, load_templates
from echolab.textproc import tokenize

SLOT = re.compile(r"\{([A-Za-z_]+)\}")


def template_patterns(tpl, slots):
    names = SLOT.findall(tpl)
    multi = [n for n in dict.fromkeys(names) if any(" " in v for v in expand_slot(slots[n]))]
    for combo in itertools.product(*[expand_slot(slots[n]) for n in multi]):
        fixed = dict(zip(multi, combo))
        placeholders = {}

        def sub(m):
            name = m.group(1)
            if name in fixed:
                return fixed[name]
            key = f"slotx{len(placeholders)}"
            placeholders[key] = name
            return key

        text = SLOT.sub(sub, tpl)
        elems = []
        for tok in tokenize(text).tokens:
            norm = tok.norm
            if norm in placeholders:
                values = sorted({v.lower() for v in expand_slot(slots[placeholders[norm]])},
                                key=lambda v: (len(v), v))
                elems.append("(" + "|".join(values) + ")" if len(values) > 1 else values[0])
            else:
                elems.append(norm)
        yield " ".join(elems)


def main(out):
    tpls = load_templates()
    lines = ["# Demo dictionary covering the bundled synthetic report templates.",
             "# characteristic<TAB>label<TAB>pattern"]
    for cid, by_label in tpls["characteristics"].items():
        for label, options in by_label.items():
            for tpl in options:
                for pat in template_patterns(tpl, tpls["slots"]):
                    lines.append(f"{cid}\t{label}\t{pat}")
    Path(out).write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/echolab/data/rules.tsv")
