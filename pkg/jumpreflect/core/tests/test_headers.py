# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

from pathlib import Path

COPYRIGHT = "Copyright (c) jumpreflect contributors."

PY_HEADER = """# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""


def check_file(file: Path, autofix: bool = False) -> bool:
    full_text = file.read_text()
    if COPYRIGHT in full_text:
        return True
    if not autofix:
        return False
    file.write_text(PY_HEADER + full_text)
    return True


def test_all_files_have_a_copyright_header(autofix: bool = False):
    package = Path(__file__).resolve().parents[2]
    assert (package / "__init__.py").is_file()
    failed = [
        file
        for file in sorted(package.rglob("*.py"))
        if not file.is_symlink() and not check_file(file, autofix=autofix)
    ]
    assert not failed, f"{failed} are missing the license header"


if __name__ == "__main__":
    test_all_files_have_a_copyright_header(autofix=True)
