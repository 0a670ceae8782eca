"""Shared generators for randomized tests."""

from __future__ import annotations

import random
import string

from specforge.spec_model import (
    LOOP_TYPES,
    MAX_EXEMPLARS,
    MEMORY_BACKENDS,
    POLICIES,
    QUANTIZATIONS,
    AgentSlot,
    Budget,
    EngineSlot,
    GateConfig,
    IntelligenceSlot,
    LearningSlot,
    RewardWeights,
    Spec,
    ToolsMemorySlot,
)

# includes quotes, backslashes, control characters and non-ASCII text
_ALPHABET = string.ascii_letters + string.digits + " _-:.,'\"\\\n\t#=[]{}" + "éß漢字🙂\x7f\x01"


def random_text(rng: random.Random, lo: int = 0, hi: int = 24) -> str:
    return "".join(rng.choice(_ALPHABET) for _ in range(rng.randint(lo, hi)))


def random_name(rng: random.Random) -> str:
    return "".join(rng.choice(string.ascii_lowercase + "_:.") for _ in range(rng.randint(1, 10)))


def random_float(rng: random.Random, lo: float, hi: float) -> float:
    # mix grid values with full-precision draws
    if rng.random() < 0.3:
        return rng.choice([lo, hi, (lo + hi) / 2])
    return rng.uniform(lo, hi)


def random_spec(rng: random.Random) -> Spec:
    tools = tuple(dict.fromkeys(random_name(rng) for _ in range(rng.randint(0, 6))))
    described = [t for t in tools if rng.random() < 0.5]
    enabled = rng.random() < 0.5
    top_p = random_float(rng, 0.0, 1.0) or 1.0
    return Spec(
        intelligence=IntelligenceSlot(
            model_id=random_name(rng),
            temperature=random_float(rng, 0.0, 2.0),
            top_p=top_p,
            max_tokens=rng.randint(1, 1 << 20),
            quantization=rng.choice(QUANTIZATIONS),
            training_marker=random_text(rng, 0, 8),
        ),
        engine=EngineSlot(
            backend=random_name(rng),
            batch_size=rng.randint(1, 256),
            kv_cache_enabled=rng.random() < 0.5,
            extra=tuple({random_name(rng): random_text(rng) for _ in range(rng.randint(0, 3))}.items()),
        ),
        agent=AgentSlot(
            loop_type=rng.choice(LOOP_TYPES),
            system_prompt=random_text(rng, 0, 80),
            exemplars=tuple((random_text(rng), random_text(rng)) for _ in range(rng.randint(0, MAX_EXEMPLARS))),
            max_turns=rng.randint(1, 100),
            tool_strategy=rng.choice(["auto", "required", "none"]),
        ),
        tools=ToolsMemorySlot(
            enabled_tools=tools,
            tool_descriptions=tuple((t, random_text(rng)) for t in described),
            memory_backend=rng.choice(MEMORY_BACKENDS),
            cloud_as_tool=rng.random() < 0.5,
        ),
        learning=LearningSlot(
            enabled=enabled,
            policy=rng.choice(POLICIES) if enabled else "none",
            reward_weights=RewardWeights(*(rng.uniform(0.01, 1.0) for _ in range(4))),
            gate_config=GateConfig(random_float(rng, 0.0, 1.0), rng.randint(1, 20)),
            budget=Budget(rng.randint(0, 1000), rng.randint(0, 10**6)),
        ),
        spec_id=random_name(rng),
        version=rng.randint(1, 50),
    )
