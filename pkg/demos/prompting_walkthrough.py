"""
Prompting and instruction data with mock clients
================================================

The two-step zero-shot protocol, the audio caption / speech sections, and
the post-hoc to ad-hoc data chain, all offline. Swap ``ScriptedClient`` or
``EchoClient`` for ``HttpClient`` to talk to a real endpoint.
"""

from avbench.clients import EchoClient, ScriptedClient
from avbench.harness import (
    PromptTemplate,
    build_adhoc_pairs,
    build_prompt,
    extract_labels,
    format_labels,
    generate_posthoc,
    run_zero_shot,
    scripted_answers,
    synthetic_composite,
)
from avbench.taxonomy import clips_from_labels

template = PromptTemplate()
print(template.base_prompt())

# empty sections leave the prompt untouched
bundle = build_prompt(template, ac="a child is crying", st="")
print(bundle.augmented[len(bundle.base):])

# free text to labels: per-line, case-insensitive name matching
print(extract_labels("Answer: Upper Limb Stereotypies\nAlso some object lining-up"))
print(format_labels({8, 6}))

# three clips, one answered with a refusal
manifest = clips_from_labels([{8}, {0, 1}, {9}], [12.0, 30.5, 8.0], ["test"] * 3)
clips = manifest.split("test")
images = {c.clip_id: synthetic_composite(c) for c in clips}
answers = {
    clips[0].clip_id: "The boy shows hand flapping near the window.",
    clips[1].clip_id: "She looks away and does not respond to her name.",
}
client = ScriptedClient(scripted_answers(images, answers))
run = run_zero_shot(client, manifest, "test", images=images)
for r in run.results:
    print(r.clip_id, repr(r.free_text[:40]), "->", sorted(r.labels))
print(f"macro-F1 {100 * run.report.macro_f1:.2f}%")

# post-hoc reasoning sees the ground truth; the ad-hoc prompt must not
records = generate_posthoc(EchoClient(), manifest, "test", images=images)
pairs = build_adhoc_pairs(records)
for rec, pair in zip(records, pairs):
    leaked = [n for n in rec.ground_truth if n in pair.prompt]
    print(pair.clip_id, rec.ground_truth, "leaked:", leaked, "target == reasoning:", pair.target == rec.reasoning)
