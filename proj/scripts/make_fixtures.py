#!/usr/bin/env python3
"""Writes the JSON Lines fixtures under data/fixtures.

Run from the repository root. Output is deterministic; the files are checked in
and regenerated only when the authored content below changes.
"""

import json
import pathlib

OUT = pathlib.Path("data/fixtures")

BOOK = [
    "Insulin lowers blood glucose by moving sugar into muscle and fat cells.",
    "The liver stores glycogen and releases glucose during fasting.",
    "Asthma narrows the airways and causes wheeze and cough at night.",
    "Salbutamol relaxes bronchial smooth muscle within minutes.",
    "Iron deficiency anaemia gives small pale red cells on the blood film.",
    "Vitamin B12 comes only from food of animal origin.",
    "The kidney filters plasma through about one million nephrons.",
    "Loop diuretics act on the thick ascending limb of Henle.",
    "Warfarin blocks the recycling of vitamin K in the liver.",
    "Heparin activates antithrombin and is given by injection.",
    "Atrial fibrillation raises the risk of stroke from atrial clots.",
    "Beta blockers slow the heart and reduce oxygen demand.",
    "Pneumonia shows fever, cough and consolidation on the chest film.",
    "Amoxicillin is a penicillin used for community pneumonia.",
    "Thyroxine replaces hormone in patients with hypothyroidism.",
    "Graves disease causes goitre, tremor and weight loss.",
    "Migraine gives throbbing one sided headache with nausea.",
    "Paracetamol overdose injures the liver after a silent day.",
    "Acetylcysteine restores glutathione after paracetamol overdose.",
    "Gout follows urate crystals deposited in a joint.",
    "Allopurinol blocks xanthine oxidase and lowers urate.",
    "Metformin is the usual first tablet for type 2 diabetes.",
    "Hypertension is often silent until organs are damaged.",
    "Statins inhibit HMG CoA reductase and lower cholesterol.",
]

PAPER = [
    ("PMC100001", "A cohort of adults showed that walking lowered blood pressure."),
    ("PMC100002", "Early antibiotics shortened the stay of children with pneumonia."),
    ("PMC100003", "Low dose aspirin reduced colorectal adenoma in this trial."),
    ("PMC100004", "Handwashing cut hospital infections by a third on two wards."),
    ("PMC100005", "Mobile reminders improved inhaler use in young asthmatics."),
    ("PMC100006", "Vitamin D did not prevent fractures in older women."),
]

GENERAL = [
    "The museum opens at nine and closes at five every day.",
    "A small bakery on the corner sells fresh bread each morning.",
]


def overfit_corpus():
    rows = []
    for i, text in enumerate(BOOK):
        rows.append({"id": f"book-{i:02d}", "source": "book", "title": f"Chapter {i + 1}", "text": text})
    for i, (pmc, text) in enumerate(PAPER):
        rows.append({"id": f"paper-{i:02d}", "source": "paper", "pmc_id": pmc, "text": text})
    for i, text in enumerate(GENERAL):
        rows.append({"id": f"general-{i:02d}", "source": "general", "text": text})
    return rows


NEAR_DUP_BASE = (
    "Chronic kidney disease is a gradual loss of kidney function over months or years. "
    "Common causes include diabetes, high blood pressure and inflammation of the filtering units. "
    "Early stages rarely cause symptoms, so testing of urine protein and blood creatinine is important "
    "in people at risk. As the disease advances, patients may notice swelling of the ankles, tiredness, "
    "itching and poor appetite. Treatment aims to slow progression by controlling blood pressure with "
    "angiotensin converting enzyme inhibitors, managing blood sugar, limiting salt and avoiding drugs "
    "that harm the kidney. Anaemia is treated with iron and erythropoietin, and bone disease with "
    "phosphate binders and vitamin D. When function falls below about fifteen percent, dialysis or "
    "transplantation is considered. Haemodialysis removes waste through an external circuit several "
    "times a week, while peritoneal dialysis uses the lining of the abdomen and can be done at home. "
    "A kidney transplant offers the best survival for suitable patients but requires lifelong "
    "immunosuppression and careful follow up in a specialist clinic. Diet advice covers protein, "
    "potassium, phosphate and fluid intake, and should be tailored to the stage of disease and the "
    "chosen form of treatment. Regular vaccination against influenza and hepatitis B is recommended."
)


def cleaning_corpus():
    near = NEAR_DUP_BASE.replace("several times a week", "three times a week")
    return [
        {"id": "c-book-1", "source": "book", "title": "Diabetes",
         "text": "Metformin reduces hepatic glucose output [1, 2] and is first line (Figure 3).\n"
                 "See https://example.org/diabetes?id=4 for dosing tables.\n"
                 "Lactic acidosis is rare (Table 2) but serious [3-5]."},
        {"id": "c-book-2", "source": "book",
         "text": "John Smith\nMary Jones, 2019\n12\n"
                 "Asthma is a chronic inflammatory disease of the airways (Smith et al., 2019).\n"
                 "Inhaled steroids control symptoms (Jones and Brown, 2020).\n\n\n"
                 "References\n1. Smith J. Asthma care. 2019.\n2. Jones M. Inhalers. 2020."},
        {"id": "c-paper-1", "source": "paper", "pmc_id": "PMC200001", "title": "Handwashing",
         "text": "Handwashing reduced infection rates on two wards [4].\nFig. 2 shows the monthly rates.\n"
                 "Bibliography\nDoe A. Hygiene. 2018."},
        {"id": "c-paper-2", "source": "paper", "title": "No identifier",
         "text": "This paper lacks a PubMed Central identifier and is excluded."},
        {"id": "c-paper-3", "source": "paper", "pmc_id": "PMC200003",
         "text": "Vitamin D did not prevent fractures in older women\t(Lee, 2021).   Data at ftp://data.example.org/vitd ."},
        {"id": "c-general-1", "source": "general",
         "text": "The museum opens at nine and closes at five every day."},
        {"id": "c-general-2", "source": "general",
         "text": "The  museum opens at nine and CLOSES at five every day."},
        {"id": "c-book-3", "source": "book", "title": "Kidney", "text": NEAR_DUP_BASE},
        {"id": "c-book-4", "source": "book", "title": "Kidney (reprint)", "text": near},
        {"id": "c-book-5", "source": "book", "text": "[7]\n(Figure 1)\nhttps://example.org"},
        {"id": "c-general-3", "source": "general",
         "text": "Café owners in München serve coffee with a smile – every day."},
    ]


CONVERSATIONS = [
    ("How to treat flu?", "Rest, drink fluids and take paracetamol for fever."),
    ("What causes a cold?", "A cold is caused by a virus such as rhinovirus."),
    ("Is a fever of 38 C dangerous?", "Usually not; watch for rash or stiff neck."),
    ("How much water should I drink?", "About two litres a day for most adults."),
    ("Can I take ibuprofen for back pain?", "Yes, with food, unless you have ulcers."),
    ("Why do I feel dizzy when I stand?", "Blood pressure may drop when you stand."),
    ("What is a normal heart rate?", "Between 60 and 100 beats per minute."),
    ("How do I stop a nosebleed?", "Lean forward and pinch the soft nose."),
    ("Should I worry about a mole?", "See a doctor if it grows or bleeds."),
    ("How long does a sprain take to heal?", "Most sprains heal within six weeks."),
    ("What helps heartburn?", "Smaller meals and an antacid often help."),
    ("Is coffee bad for the heart?", "Moderate coffee is safe for most people."),
    ("How can I sleep better?", "Keep regular hours and avoid late screens."),
    ("When is a cough serious?", "If it lasts three weeks or brings blood."),
    ("What are signs of dehydration?", "Thirst, dark urine and a dry mouth."),
    ("How do vaccines work?", "They train the immune system to a germ."),
]

ENTITIES = [
    ("Aspirin", "An antiplatelet drug that blocks cyclooxygenase."),
    ("Metformin", "A biguanide that lowers glucose output."),
    ("Asthma", "Chronic airway inflammation with wheeze."),
    ("Warfarin", "An oral vitamin K antagonist."),
    ("Gout", "Arthritis caused by urate crystals."),
    ("Insulin", "A hormone that lowers blood glucose."),
    ("Anaemia", "A low level of haemoglobin in blood."),
    ("Heparin", "An injected anticoagulant."),
]

TRIPLES = [
    ("Aspirin", "treats", "fever"),
    ("Metformin", "treats", "diabetes"),
    ("Salbutamol", "relieves", "asthma"),
    ("Warfarin", "prevents", "stroke"),
    ("Allopurinol", "prevents", "gout"),
    ("Smoking", "causes", "cancer"),
    ("Iron", "treats", "anaemia"),
    ("Statins", "lower", "cholesterol"),
]

# (dataset, question, options, answer_idx, context)
MCQA = [
    ("medqa_usmle", "First oral drug for type 2 diabetes?", ["Insulin", "Metformin", "Warfarin", "Heparin"], 1, None),
    ("medqa_usmle", "Antidote for paracetamol overdose?", ["Naloxone", "Atropine", "Acetylcysteine", "Flumazenil"], 2, None),
    ("medqa_usmle", "Drug that blocks xanthine oxidase?", ["Allopurinol", "Colchicine", "Aspirin", "Prednisolone"], 0, None),
    ("medqa_usmle", "Vitamin found only in animal food?", ["Vitamin C", "Vitamin B7", "Vitamin B12", "Vitamin D"], 2, None),
    ("medqa_usmle", "Reliever inhaler for asthma?", ["Budesonide", "Montelukast", "Tiotropium", "Salbutamol"], 3, None),
    ("medqa_usmle", "Loop diuretic?", ["Furosemide", "Spironolactone", "Amiloride", "Mannitol"], 0, None),
    ("medqa_usmle", "Hormone replaced in hypothyroidism?", ["Cortisol", "Thyroxine", "Insulin", "Glucagon"], 1, None),
    ("medqa_usmle", "Reversal agent for heparin?", ["Vitamin K", "Protamine", "Naloxone", "Glucagon"], 1, None),
    ("medqa_usmle", "Statins inhibit which enzyme?", ["Lipase", "HMG CoA reductase", "Amylase", "Renin"], 1, None),
    ("medqa_usmle", "Cause of goitre with weight loss?", ["Myxoedema", "Cushing", "Graves disease", "Addison"], 2, None),
    ("medmcqa", "Organ that stores glycogen?", ["Liver", "Spleen", "Lung", "Skin"], 0, None),
    ("medmcqa", "Site of loop diuretic action?", ["Glomerulus", "Proximal tubule", "Collecting duct", "Loop of Henle"], 3, None),
    ("medmcqa", "Warfarin antagonises which vitamin?", ["Vitamin A", "Vitamin K", "Vitamin E", "Vitamin C"], 1, None),
    ("medmcqa", "Red cells in iron deficiency are?", ["Large", "Normal", "Small and pale", "Sickle"], 2, None),
    ("medmcqa", "Crystals deposited in gout?", ["Urate", "Calcium", "Cystine", "Oxalate"], 0, None),
    ("medmcqa", "Penicillin used for pneumonia?", ["Vancomycin", "Amoxicillin", "Gentamicin", "Metronidazole"], 1, None),
    ("medmcqa", "Heparin acts through?", ["Thrombin", "Plasmin", "Antithrombin", "Fibrin"], 2, None),
    ("medmcqa", "Beta blockers slow the?", ["Gut", "Kidney", "Lung", "Heart"], 3, None),
    ("medmcqa", "Migraine headache is usually?", ["One sided", "Bilateral band", "Occipital", "Painless"], 0, None),
    ("medmcqa", "Filtering unit of the kidney?", ["Alveolus", "Nephron", "Acinus", "Villus"], 1, None),
    ("medmcqa", "Arrhythmia that raises stroke risk?", ["Sinus rhythm", "Heart block", "Atrial fibrillation", "Bradycardia"], 2, None),
    ("medmcqa", "Insulin moves glucose into?", ["Bone", "Muscle and fat", "Brain only", "Red cells only"], 1, None),
    ("pubmedqa", "Did walking lower blood pressure?", ["yes", "no", "maybe"], 0, "Adults who walked daily had lower pressure."),
    ("pubmedqa", "Did vitamin D prevent fractures?", ["yes", "no", "maybe"], 1, "Fracture rates were equal in both groups."),
    ("pubmedqa", "Does aspirin reduce adenoma?", ["yes", "no", "maybe"], 0, "Adenoma was less common with aspirin."),
    ("pubmedqa", "Do reminders help inhaler use?", ["yes", "no", "maybe"], 0, "Use rose after text reminders."),
    ("pubmedqa", "Does coffee cause arrhythmia?", ["yes", "no", "maybe"], 2, "Results were mixed across small studies."),
    ("pubmedqa", "Did handwashing cut infections?", ["yes", "no", "maybe"], 0, "Infections fell by a third."),
    ("pubmedqa", "Does salt raise pressure in all?", ["yes", "no", "maybe"], 2, "Only some people were salt sensitive."),
    ("pubmedqa", "Did antibiotics lengthen stay?", ["yes", "no", "maybe"], 1, "Early antibiotics shortened stay."),
    ("pubmedqa", "Do statins lower cholesterol?", ["yes", "no", "maybe"], 0, "LDL fell by forty percent."),
    ("pubmedqa", "Did the diet prevent gout?", ["yes", "no", "maybe"], 1, "Attacks were unchanged on the diet."),
]

RATIONALES = {
    "qa-00": "Metformin lowers hepatic glucose output and is the usual first tablet.",
    "qa-01": "Acetylcysteine restores glutathione after paracetamol overdose.",
    "qa-03": "Vitamin B12 is made by microorganisms and reaches humans through animal food.",
}

TABLE = [
    {"name": "ChatGPT", "values": {"medqa_usmle": 57.0, "medmcqa": 44.0, "pubmedqa": 63.9}, "printed_average": 54.97},
    {"name": "PMC-LLaMA", "values": {"medqa_usmle": 56.36, "medmcqa": 56.04, "pubmedqa": 77.9}, "printed_average": 64.43},
]


def papers10():
    rows = []
    for i in range(10):
        row = {"id": f"p{i}", "source": "paper", "text": f"Paper number {i} reports a small clinical study."}
        if i % 5 not in (1, 3):
            row["pmc_id"] = f"PMC30000{i}"
        rows.append(row)
    return rows


def write_jsonl(name, rows):
    with open(OUT / name, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    write_jsonl("overfit_corpus.jsonl", overfit_corpus())
    write_jsonl("cleaning_corpus.jsonl", cleaning_corpus())
    write_jsonl("papers10.jsonl", papers10())
    write_jsonl("conversations.jsonl",
                [{"id": f"conv-{i:02d}", "instruction": q, "response": a} for i, (q, a) in enumerate(CONVERSATIONS)])
    write_jsonl("kg_entities.jsonl", [{"entity": n, "description": d} for n, d in ENTITIES])
    write_jsonl("kg_triples.jsonl", [{"head": h, "relation": r, "tail": t} for h, r, t in TRIPLES])
    rows = []
    for i, (ds, q, opts, ans, ctx) in enumerate(MCQA):
        row = {"id": f"qa-{i:02d}", "dataset": ds, "question": q, "options": opts, "answer_idx": ans}
        if ctx is not None:
            row["context"] = ctx
        rows.append(row)
    write_jsonl("mcqa_train.jsonl", rows)
    with open(OUT / "rationales.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(RATIONALES, f, indent=2, ensure_ascii=False)
        f.write("\n")
    write_jsonl("table_rows.jsonl", TABLE)


if __name__ == "__main__":
    main()
