"""Compile a free-text rubric into a locked, hash-addressed bundle.

Walks the full locking loop: draft via the (offline) mock backend,
validate the drafted shape, seal with a content digest, write the
canonical file, then show that any edit to the file is caught.
"""

import json
import tempfile
from pathlib import Path

from rulers import (
    BundleIntegrityError,
    CompileParams,
    MockJudge,
    RawRubric,
    compile_rubric,
    load_bundle,
    save_bundle,
)

RUBRIC = """\
Score short technical answers. Reward a clearly stated claim,
concrete supporting evidence, and honest treatment of limitations.
Penalize padding and unsupported assertions.
"""


def main():
    raw = RawRubric(text=RUBRIC, scale_min=1, scale_max=6,
                    trait_names=("claim quality", "grounding"))
    params = CompileParams(traits=2, items=6, min_evidence=2,
                           high_score_threshold=5, version="demo-1")
    sealed = compile_rubric(raw, MockJudge(), params)

    print(f"compiled {len(sealed.taxonomy)} traits / {len(sealed.checklist)} items")
    for trait in sealed.taxonomy:
        items = [i.id for i in sealed.checklist if i.trait_id == trait.id]
        print(f"  {trait.id} {trait.name}: items {', '.join(items)}")
    print(f"digest {sealed.digest}")

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "bundle.json"
        save_bundle(sealed, path)
        reloaded = load_bundle(path)
        print(f"reloaded digest matches: {reloaded.digest == sealed.digest}")

        # one flipped field breaks the seal
        doc = json.loads(path.read_text())
        doc["scale_max"] = 7
        path.write_text(json.dumps(doc))
        try:
            load_bundle(path)
        except BundleIntegrityError as exc:
            print(f"tamper caught: {exc}")


if __name__ == "__main__":
    main()
