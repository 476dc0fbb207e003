"""End-to-end smoke test of the pymsslam extension.

Builds the extension with cargo when it is not importable, then maps two
sessions, localizes a third and checks the map is left untouched.
"""

import importlib
import json
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_extension():
    try:
        return importlib.import_module("pymsslam")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "msslam-py"], cwd=ROOT, check=True
    )
    target = pathlib.Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
    lib = next(
        p
        for name in ("libpymsslam.so", "libpymsslam.dylib", "pymsslam.dll")
        if (p := target / "release" / name).exists()
    )
    out = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(lib, out / ("pymsslam.pyd" if lib.suffix == ".dll" else "pymsslam.so"))
    sys.path.insert(0, str(out))
    return importlib.import_module("pymsslam")


def main():
    msslam = load_extension()

    world = msslam.generate_world(7)
    assert json.loads(world)["schema"] == "msslam.world/1"

    first = msslam.simulate_session(world, "SU", "1", 1)
    second = msslam.simulate_session(world, "SU", "2", 2)
    query = msslam.simulate_session(world, "SU", "A", 3)

    m = msslam.Map("SU", world)
    s1 = m.map_session(first)
    s2 = m.map_session(second)
    assert s1["aligned"] and s2["aligned"], (s1, s2)
    assert m.sessions == 2 and m.nodes == s1["frames"] + s2["frames"]
    print(m)

    before = m.hash()
    rows = m.localize(query, map_id="1+2")
    assert m.hash() == before, "localization modified the map"
    localized = sum(r["outcome"] != "failed" for r in rows)
    assert localized * 2 > len(rows), f"{localized}/{len(rows)} localized"
    print(f"localized {localized}/{len(rows)} frames")

    # Poses travel as quaternions, so a reloaded map matches field by field
    # up to rounding rather than byte for byte.
    back = msslam.Map.from_json(m.to_json())
    assert (back.sessions, back.nodes, back.links, back.words) == (
        m.sessions,
        m.nodes,
        m.links,
        m.words,
    )

    single = msslam.Map("SU", world)
    single.map_session(query)
    merged = msslam.Map.merge([m, single])
    assert merged.sessions == 3

    try:
        msslam.Map("XX")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown family accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
