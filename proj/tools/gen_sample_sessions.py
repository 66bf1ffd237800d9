#!/usr/bin/env python3
"""Regenerates data/sample_sessions.jsonl, the 200-session synthetic corpus
used by the tests.

Deterministic: same seed, same file. The first 32 sessions have pairwise
distinct contexts (a numbered tag character in the question turn), so a
model can memorize them cleanly. Sessions 150+ include over-long turns and
more than seven utterances to exercise truncation, plus a handful of exact
duplicates to exercise deduplication.
"""

import json
import random
from pathlib import Path

SEED = 42
OUT = Path(__file__).resolve().parent.parent / "data" / "sample_sessions.jsonl"

GENDERS = ["男", "女"]
ADDRESSES = ["北京", "上海", "广州", "成都", "杭州", "西安", "武汉", "南京"]
INTERESTS = ["电影", "音乐", "旅行", "美食", "读书", "游戏", "运动", "摄影", "绘画", "跑步"]
TAGS = "甲乙丙丁戊己庚辛壬癸子丑寅卯辰巳午未申酉戌亥一二三四五六七八九十百千万东南西北春夏秋冬"
GREETINGS = ["你好", "你好呀", "嗨", "在吗", "早上好", "晚上好"]
QUESTIONS = ["你喜欢什么", "你平时做什么", "你的爱好是什么", "周末做什么", "你在哪里", "你是谁"]
SMALLTALK = ["今天天气不错", "我刚下班", "最近有点忙", "好久不见", "吃饭了吗", "我在看书"]


def profile(rng):
    return {
        "gender": rng.choice(GENDERS),
        "address": rng.choice(ADDRESSES),
        "interests": rng.sample(INTERESTS, rng.randint(0, 3)),
    }


def response_for(persona, rng):
    kind = rng.randint(0, 2)
    if kind == 0 and persona["interests"]:
        return "我喜欢" + "和".join(persona["interests"][:2])
    if kind == 1:
        return "我住在" + persona["address"]
    return "我是" + persona["gender"] + "生在" + persona["address"]


def make_session(i, rng):
    a, b = profile(rng), profile(rng)
    tag = TAGS[i % len(TAGS)] + TAGS[(i * 7 + 3) % len(TAGS)]
    turns = [
        {"speaker": "A", "text": rng.choice(GREETINGS)},
        {"speaker": "B", "text": rng.choice(SMALLTALK)},
        {"speaker": "A", "text": tag + rng.choice(QUESTIONS)},
    ]
    if i >= 32 and rng.random() < 0.5:
        turns.insert(1, {"speaker": "B", "text": rng.choice(GREETINGS)})
    session = {
        "turns": turns,
        "profiles": {"A": a, "B": b},
        "responder": "B",
        "response": response_for(b, rng)[:15],
    }
    if i >= 150:
        if i % 3 == 0:  # long session: truncation keeps the last 7 utterances
            extra = [{"speaker": "AB"[t % 2], "text": rng.choice(SMALLTALK) + "真的" * 6} for t in range(8)]
            session["turns"] = extra + session["turns"]
        if i % 7 == 0:  # a speaker without any profile entry
            session["turns"].append({"speaker": "C", "text": rng.choice(SMALLTALK)})
            session["turns"] = session["turns"][-7:]
    return session


def main():
    rng = random.Random(SEED)
    sessions = [make_session(i, rng) for i in range(196)]
    # exact duplicates for the deduplication path
    sessions += [sessions[40], sessions[41], sessions[40], sessions[42]]
    OUT.parent.mkdir(parents=True, exist_ok=True)
    with OUT.open("w", encoding="utf-8") as f:
        for s in sessions:
            f.write(json.dumps(s, ensure_ascii=False) + "\n")
    print(f"wrote {len(sessions)} sessions to {OUT}")


if __name__ == "__main__":
    main()
