#!/usr/bin/env python3
"""Test trainer: remembers every training text and predicts its label,
falling back to the most common label. Speaks the JSON-lines protocol."""
import collections
import json
import sys

memory = {}
fallback = None


def rows_from(msg):
    if "dataset_path" in msg:
        with open(msg["dataset_path"]) as fh:
            lines = [json.loads(l) for l in fh if l.strip()]
        return [r for r in lines if "schema_version" not in r], "path"
    return msg["dataset"], "inline"


def handle(msg):
    global memory, fallback
    cmd = msg.get("cmd")
    if cmd == "hello":
        return {"ok": True, "kinds": ["single_text_classification"], "name": "memo", "protocol_version": 1}
    if cmd == "train":
        if msg.get("config", {}).get("fail"):
            return {"ok": False, "error": "asked to fail"}
        rows, via = rows_from(msg)
        memory = {r["x"]: r["y"] for r in rows}
        fallback = collections.Counter(r["y"] for r in rows).most_common(1)[0][0]
        return {"ok": True, "train_report": {"n": len(rows), "via": via, "labels": msg["task"]["labels"]}}
    if cmd == "predict":
        out = []
        for i, r in enumerate(msg["examples"]):
            y = memory.get(r["x"], fallback)
            out.append(y if i % 2 == 0 else {"label": y, "score": 0.5})
        return {"ok": True, "predictions": out}
    if cmd == "shutdown":
        return {"ok": True}
    return {"ok": False, "error": "unknown cmd"}


for line in sys.stdin:
    try:
        msg = json.loads(line)
    except ValueError:
        print(json.dumps({"ok": False, "error": "bad json"}), flush=True)
        continue
    reply = handle(msg)
    print("handled " + str(msg.get("cmd")), file=sys.stderr, flush=True)
    print(json.dumps(reply), flush=True)
    if msg.get("cmd") == "shutdown":
        break
