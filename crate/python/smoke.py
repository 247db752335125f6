"""Smoke test for the mlboot_py extension.

Uses an installed mlboot_py if there is one, otherwise the library built by
`cargo build --release -p mlboot-py`. Pass --ddc to also run the (slow)
diverse double-compilation check.
"""

import importlib.util
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "corpus"


def load_module():
    try:
        import mlboot_py

        return mlboot_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libmlboot_py.so"
        if lib.exists():
            dest = Path(tempfile.mkdtemp()) / "mlboot_py.so"
            shutil.copy(lib, dest)
            spec = importlib.util.spec_from_file_location("mlboot_py", dest)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("mlboot_py not found: build it with `cargo build --release -p mlboot-py`")


def main():
    m = load_module()
    stdlib = (CORPUS / "stdlib" / "stdlib.mml").read_text()

    img = m.compile_miniml([("stdlib.mml", stdlib), ("hello.mml", 'let () = print_endline "hello"\n')])
    out, err, status = img.run()
    assert (out, err, status) == (b"hello\n", b"", 0), (out, err, status)
    assert img.verify() == []
    assert "HALT" in img.disassemble()
    assert "print_string" in img.primitives

    data = img.to_bytes()
    assert data[:4] == b"MBC1"
    again = m.Image.from_bytes(data)
    assert again == img and again.to_bytes() == data
    assert len(m.sha256_hex(data)) == 64

    try:
        m.compile_miniml([("bad.mml", "let x = y\n")])
    except ValueError as e:
        assert "unbound variable y" in str(e)
    else:
        raise AssertionError("expected a compile error")

    try:
        m.Image.from_bytes(b"nope")
    except ValueError:
        pass
    else:
        raise AssertionError("expected a decode error")

    prog = m.compile_miniml([("raise.mml", "exception E of int\nlet () = raise (E 3)\n")])
    assert prog.run() == (b"", b"Fatal error: exception E(3)\n", 2)

    out, _, status = m.interp([str(CORPUS / "tests" / "hello.fml")], corpus=str(CORPUS))
    assert (out, status) == (b"hello\n", 0), (out, status)

    seed = m.Image.load(str(CORPUS / "seed" / "fullc.boot.byte"))
    print("seed:", seed)

    if "--ddc" in sys.argv:
        with tempfile.TemporaryDirectory() as work:
            verdict, report = m.ddc_check(work, corpus=str(CORPUS))
            print(report, end="")
            assert verdict == "PASS"

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
