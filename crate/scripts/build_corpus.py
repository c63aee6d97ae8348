"""Assemble the 1 MiB English byte corpus used by the training tests.

Sources are PSF-licensed CPython documentation: the pydoc topic pages and
stdlib module/function docstrings. Usage: python3 scripts/build_corpus.py data/corpus_en.txt
Output is deterministic for a given
CPython version; the committed data/corpus_en.txt is the reference copy.
"""
import importlib
import inspect
import pkgutil
import sys
import warnings

import pydoc_data.topics

TARGET = 1 << 20

parts = [pydoc_data.topics.topics[k] for k in sorted(pydoc_data.topics.topics)]
warnings.simplefilter("ignore")
for info in sorted(pkgutil.iter_modules(), key=lambda m: m.name):
    name = info.name
    if name.startswith("_") or name in ("antigravity", "this", "idlelib", "tkinter", "turtle"):
        continue
    if info.module_finder.path.find("site-packages") >= 0 or "dist-packages" in str(info.module_finder.path):
        continue
    try:
        mod = importlib.import_module(name)
    except BaseException:
        continue
    doc = inspect.getdoc(mod)
    if doc:
        parts.append(doc)
    for attr in sorted(dir(mod)):
        if attr.startswith("_"):
            continue
        try:
            obj = getattr(mod, attr)
        except BaseException:
            continue
        if getattr(obj, "__module__", None) != name:
            continue
        d = inspect.getdoc(obj)
        if d and len(d) > 80:
            parts.append(d)
        if inspect.isclass(obj):
            for meth in sorted(vars(obj)):
                if meth.startswith("_"):
                    continue
                md = inspect.getdoc(vars(obj)[meth])
                if md and len(md) > 80 and md != d:
                    parts.append(md)

text = "\n\n".join(parts).encode("ascii", "ignore")
if len(text) < TARGET:
    sys.exit(f"only {len(text)} bytes available")
with open(sys.argv[1], "wb") as f:
    f.write(text[:TARGET])
