#!/usr/bin/env python3
"""
Environment check for the Oryx offline MARL lab.
Verifies the interpreter, the numeric stack, the repository layout and the golden data
before you spend hours on a training run.
"""

import json
import sys
from pathlib import Path

REQUIRED_PACKAGES = ["torch", "numpy", "scipy", "pydantic", "pytest"]
REQUIRED_PATHS = [
    "main.py", "run.py", "requirements.txt", "pytest.ini",
    "models/", "services/", "tests/", "test_data/",
]
GOLDEN_FILES = ["test_data/golden/welch_case.json"]
MIN_PYTHON = (3, 9)


def check_python_version():
    """Interpreter must be MIN_PYTHON or newer"""
    current = sys.version_info[:3]
    label = ".".join(str(part) for part in current)
    if current[:2] < MIN_PYTHON:
        print(f"❌ Python {label} found, {MIN_PYTHON[0]}.{MIN_PYTHON[1]}+ needed")
        return False
    print(f"✅ Python {label}")
    return True


def check_dependencies(packages=REQUIRED_PACKAGES):
    """Import each package; returns (ok, names that failed to import)"""
    missing = []
    for name in packages:
        try:
            module = __import__(name)
        except ImportError:
            print(f"❌ {name} - not importable")
            missing.append(name)
            continue
        print(f"✅ {name} {getattr(module, '__version__', '')}".rstrip())
    return not missing, missing


def check_float64_autograd():
    """The learner's gradient checks need float64 reverse mode"""
    try:
        import torch
    except ImportError:
        print("⚠️  torch missing, float64 autograd not checked")
        return False
    x = torch.tensor([1.5, -2.0], dtype=torch.float64, requires_grad=True)
    (grad,) = torch.autograd.grad((x ** 3).sum(), x)
    expected = torch.tensor([6.75, 12.0], dtype=torch.float64)
    if grad.dtype != torch.float64 or not torch.allclose(grad, expected, rtol=0, atol=1e-12):
        print("❌ float64 autograd returned unexpected gradients")
        return False
    print("✅ float64 autograd")
    return True


def check_container_roundtrip():
    """Encode and decode a tiny container so a broken zlib/struct build shows up here"""
    try:
        from services.container import decode_container, encode_container
    except ImportError as exc:
        print(f"❌ services.container not importable: {exc}")
        return False
    blob = encode_container({"kind": "setup-check"}, b"\x01\x02")
    header, body = decode_container(blob, lambda h, b: b, source="setup-check")
    if header.get("kind") != "setup-check" or body != b"\x01\x02":
        print("❌ container round trip changed its contents")
        return False
    print("✅ container round trip")
    return True


def check_project_structure(root: Path = Path("."), required_paths=REQUIRED_PATHS):
    """Returns (ok, required paths missing under root)"""
    missing = [p for p in required_paths if not (root / p).exists()]
    for path in required_paths:
        print(f"❌ {path} - missing" if path in missing else f"✅ {path}")
    return not missing, missing


def check_test_data(root: Path = Path(".")):
    """Every golden file must exist and parse as JSON"""
    ok = True
    for file_path in GOLDEN_FILES:
        try:
            json.loads((root / file_path).read_text())
        except (OSError, ValueError):
            print(f"❌ {file_path} - missing or unreadable")
            ok = False
        else:
            print(f"✅ {file_path}")
    return ok


def main():
    print("🚀 Oryx Offline MARL Lab - Environment Check")
    print("=" * 60)

    print("\n🐍 Interpreter")
    python_ok = check_python_version()

    print("\n📦 Packages")
    deps_ok, missing_deps = check_dependencies()

    print("\n🧮 Numeric stack")
    numeric_ok = deps_ok and check_float64_autograd() and check_container_roundtrip()

    print("\n📁 Repository layout")
    layout_ok, missing_paths = check_project_structure()

    print("\n📄 Golden data")
    golden_ok = check_test_data()

    print("\n" + "=" * 60)
    problems = []
    if not python_ok:
        problems.append(f"upgrade Python to {MIN_PYTHON[0]}.{MIN_PYTHON[1]}+")
    if not deps_ok:
        problems.append(f"pip install -r requirements.txt (missing: {', '.join(missing_deps)})")
    elif not numeric_ok:
        problems.append("reinstall torch; float64 gradients or the container codec misbehave")
    if not layout_ok:
        problems.append(f"restore {', '.join(missing_paths)}")
    if not golden_ok:
        problems.append("restore test_data/golden/ from version control")

    if problems:
        print("❌ Not ready:")
        for problem in problems:
            print(f"   - {problem}")
        return 1

    print("🎉 Ready. Try:")
    print("   python main.py gen-data --policy expert --transitions 10000 --output datasets/expert.oryx")
    print("   python main.py train --dataset datasets/expert.oryx --updates 2000")
    print("   python main.py eval --checkpoint runs/oryx/checkpoint.oryx")
    print("💡 python run.py runs the full T-Maze protocol (configure with ORYX_* variables)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
