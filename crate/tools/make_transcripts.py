"""Generate the execution task suite and its scripted transcripts.

Each transcript replays a handbook procedure (optionally with extra steps)
followed by a Final Answer. Run from the repository root.
"""
import json
from pathlib import Path

CORPUS = Path("fixtures/corpus")

THOUGHTS = {
    "select_probe": "mount the {probe_type} probe",
    "apply_gel": "apply coupling gel to the {region} region",
    "move_probe": "position the probe over the {region} region",
    "set_contact_force": "set a contact force of {newtons} N",
    "adjust_probe_angle": "tilt the probe to {degrees} degrees",
    "start_scan": "start a {pattern} acquisition",
    "capture_image": "capture a frame",
    "stop_scan": "stop the acquisition",
    "query_state": "check the robot state before acting",
    "retract_probe": "lift the probe off the patient",
}

TASKS = [
    ("thyroid_scan", "thyroid_scan", "scan the patient's thyroid", "neck", {}),
    ("carotid_scan", "carotid_scan", "check the carotid artery for plaque", "neck_carotid", {}),
    ("liver_scan", "liver_scan", "please perform a liver ultrasound", "abdomen_liver", {}),
    ("gallbladder_scan", "gallbladder_scan", "look at the gallbladder for stones", "abdomen_gallbladder", {}),
    ("kidney_scan", "kidney_scan", "scan the right kidney", "abdomen_kidney", {}),
    ("cardiac_scan", "cardiac_scan", "perform an echocardiogram of the heart", "chest_cardiac", {}),
    ("thyroid_checked", "thyroid_scan", "check the thyroid gland in the neck for nodules", "neck", {"prefix": [("query_state", {})]}),
    ("liver_two_views", "liver_scan", "examine the liver for fatty changes and take two images", "abdomen_liver", {"extra_capture": True}),
    ("kidney_retract", "kidney_scan", "scan the kidney and lift the probe when done", "abdomen_kidney", {"suffix": [("retract_probe", {})]}),
    ("carotid_angled", "carotid_scan", "scan the carotid artery with the probe slightly tilted", "neck_carotid", {"angle": 10}),
]


def action(api, args):
    thought = THOUGHTS[api].format(**args)
    return f"Thought: {thought}\nAction: {api}\nAction Input: {json.dumps(args)}"


def main():
    procs = {}
    for line in (CORPUS / "handbook.jsonl").read_text().splitlines():
        if line.strip():
            p = json.loads(line)
            procs[p["task_id"]] = p
    tasks_out = []
    out_dir = CORPUS / "transcripts"
    out_dir.mkdir(exist_ok=True)
    for task_id, proc, instruction, region, opts in TASKS:
        steps = [(s["api_name"], s["args"]) for s in procs[proc]["steps"]]
        if "angle" in opts:
            i = next(i for i, (a, _) in enumerate(steps) if a == "start_scan")
            steps.insert(i, ("adjust_probe_angle", {"degrees": opts["angle"]}))
        if opts.get("extra_capture"):
            i = next(i for i, (a, _) in enumerate(steps) if a == "capture_image")
            steps.insert(i, ("capture_image", {}))
        steps = opts.get("prefix", []) + steps + opts.get("suffix", [])
        texts = [action(a, args) for a, args in steps]
        texts.append(f"Thought: the {region} images are acquired\nFinal Answer: {procs[proc]['title']} complete")
        with open(out_dir / f"{task_id}.jsonl", "w") as f:
            for i, t in enumerate(texts):
                f.write(json.dumps({"turn_index": i, "text": t}) + "\n")
        tasks_out.append({"task_id": task_id, "instruction": instruction, "region": region})
    with open(CORPUS / "tasks.jsonl", "w") as f:
        for t in tasks_out:
            f.write(json.dumps(t) + "\n")


if __name__ == "__main__":
    main()
