#!/usr/bin/env python3
"""Regenerates the bundled toy assets under data/toy/.

Writes a small synthetic corpus of period-style novels wrapped in
Gutenberg-style boilerplate, a corpus manifest, a sample probing dataset
with multi-hot concept labels, and a reduced byte-level BPE vocabulary
trained on the corpus. The outputs are checked in; rerun only when the
assets need to change.

    python3 tools/make_toy_assets.py [--root data/toy]
"""

import argparse
import json
import pathlib
import random
import textwrap

WOMEN = ["Elinor", "Marianne", "Catherine", "Harriet", "Lucy", "Jane",
         "Eleanor", "Fanny", "Agnes", "Caroline", "Margaret", "Emma"]
MEN = ["Edward", "Henry", "Robert", "Charles", "Frederick", "William",
       "George", "Arthur", "Thomas", "Gilbert"]
SURNAMES = ["Darcy", "Bennet", "Thornton", "Weston", "Knightley", "Crawford",
            "Ferrars", "Tilney", "Grey", "Markham", "Hale", "Lennox"]
PLACES = ["Bath", "London", "the parsonage", "the village", "Pemberley",
          "the old hall", "Milton", "the cottage", "the assembly rooms",
          "the garden", "the church", "the north country"]
FEELINGS = ["joy", "sorrow", "anxiety", "grief", "delight", "shame",
            "tenderness", "anger", "hope", "despair", "pity", "pride"]
VIRTUES = ["duty", "honour", "prudence", "patience", "obligation",
           "conscience", "principle", "propriety"]
MONEY = ["fortune", "estate", "income", "inheritance", "property",
         "ten thousand pounds", "a small annuity", "the family jewels"]
KIN = ["mother", "father", "sister", "brother", "aunt", "uncle", "cousin",
       "daughter", "son", "niece"]
RANKS = ["gentleman", "lady", "servant", "tradesman", "baronet",
         "clergyman", "governess", "farmer", "nobleman", "housekeeper"]
SOCIAL = ["the neighbourhood", "society", "the whole town", "the county",
          "polite company", "the parish", "fashionable circles"]

TEMPLATES = [
    "Miss {w} had always believed that a woman of sense must guard her heart against {feel}.",
    "Mr. {s} spoke with great warmth of his {kin}, and of the {money} which would one day be his.",
    "It was generally agreed in {soc} that {m} {s} would marry before the spring.",
    "Her {kin} sat by the window and wept, for the news of the engagement had come too late.",
    "\"I cannot think of marriage,\" said {w}, \"while my {kin} is so unwell.\"",
    "The {rank} bowed and withdrew, leaving the two sisters alone in the drawing room.",
    "{m} felt the whole weight of his {virtue}, and resolved to speak to her father at once.",
    "There was nothing in the world so dear to {w} as the good opinion of her {kin}.",
    "The scandal of the elopement was whispered through {soc} within a week.",
    "A young man of {money} is seldom long without the attention of anxious mothers.",
    "She walked alone to {place}, and there she found Mr. {s} waiting beneath the trees.",
    "Lady {s} declared that no daughter of hers should marry a mere {rank}.",
    "His wife smiled at him across the table, and he thought himself the happiest of men.",
    "The girl was silent, but her eyes were full of {feel} and of something like love.",
    "{w} knew that her {virtue} required her to refuse him, whatever it cost her heart.",
    "The old {rank} had saved a little money, and hoped to leave it to his {kin}.",
    "Every family in {soc} was eager to know whether the wedding would take place at {place}.",
    "Mrs. {s} could talk of nothing but the {money} of her future son-in-law.",
    "He loved her with a constancy that neither time nor {feel} could diminish.",
    "It is a truth well known that a poor woman must marry well or not at all.",
    "The brothers quarrelled over the {money}, and their mother could not reconcile them.",
    "\"You forget your station, sir,\" said the lady coldly, \"and you forget your {virtue}.\"",
    "{m} {s} was a proud man, and the world thought him cold, yet his heart was warm.",
    "Her husband had left her nothing but debts, and the whole town pitied the widow.",
    "The servants talked of the disgrace in the kitchen, and soon the village knew it too.",
    "Miss {w} sat at the pianoforte and sang a song of love and parting.",
    "No man of honour could break such a promise, and Mr. {s} would not break his.",
    "They were married at {place} on a fine morning in June, and the bride wore white.",
    "A sense of {virtue} kept her at home, though every wish of her heart drew her away.",
    "The younger {kin} was admired in {soc} for her beauty and her gentle manners.",
    "\"He is very rich,\" said her mother, \"and riches cover a multitude of faults.\"",
    "He was the son of a {rank}, and he had been taught to respect his betters.",
    "She could not forgive him the insult to her family, nor forget the {feel} it caused.",
    "The ball at {place} was the great event of the season for all the young ladies.",
    "Mr. {s} and his sister arrived at {place} in a handsome carriage with four horses.",
    "Dr. {s} attended the poor woman through the winter, and asked nothing in return.",
    "A letter from her {kin} arrived that evening, and it changed everything.",
    "The gentlemen spoke of politics and property, while the ladies spoke of marriages.",
    "{w} blushed deeply when her name was mentioned, and her father noticed it.",
    "There was a rumour that the young {rank} had lost his whole {money} at cards.",
    "Her heart was torn between {virtue} to her family and love for a man they despised.",
    "The boy ran to fetch his father, who came at once from the fields.",
    "In the eyes of {soc}, a woman without a husband was a woman without a place.",
    "He had asked for her hand twice, and twice she had refused him with great {feel}.",
    "The two families had been neighbours for three generations at {place}.",
]

EXTRA_SHORT = ["She left.", "He stayed.", "All was quiet.", "It rained.",
               "Nobody spoke.", "They waited."]

NOVELS = [
    ("sense-and-fortune", "Sense and Fortune", "A Lady", "train"),
    ("the-parsonage", "The Parsonage", "A Lady", "train"),
    ("a-winter-at-bath", "A Winter at Bath", "Miss E. Ward", "train"),
    ("the-heiress", "The Heiress", "Miss E. Ward", "train"),
    ("north-and-home", "North and Home", "Mrs. C. Hale", "train"),
    ("the-governess", "The Governess", "Mrs. C. Hale", "train"),
    ("duty-and-desire", "Duty and Desire", "Miss A. Grey", "train"),
    ("the-widows-daughter", "The Widow's Daughter", "Miss M. Brunt", "eval"),
]

ROMAN = ["I", "II", "III", "IV", "V", "VI", "VII", "VIII"]


def fill(rng, template):
    return template.format(
        w=rng.choice(WOMEN), m=rng.choice(MEN), s=rng.choice(SURNAMES),
        place=rng.choice(PLACES), feel=rng.choice(FEELINGS),
        virtue=rng.choice(VIRTUES), money=rng.choice(MONEY),
        kin=rng.choice(KIN), rank=rng.choice(RANKS), soc=rng.choice(SOCIAL))


def novel_body(rng, chapters, paragraphs_per_chapter):
    out = []
    for c in range(chapters):
        out.append(f"CHAPTER {ROMAN[c]}.")
        out.append("")
        for p in range(paragraphs_per_chapter):
            sentences = [fill(rng, rng.choice(TEMPLATES))
                         for _ in range(rng.randint(3, 6))]
            if rng.random() < 0.15:
                sentences.insert(rng.randint(0, len(sentences)),
                                 rng.choice(EXTRA_SHORT))
            out.extend(textwrap.wrap(" ".join(sentences), width=72))
            out.append("")
            if rng.random() < 0.05:
                out.append("[Illustration: A lady seated at a window.]")
                out.append("")
        out.append("")
    return out


def gutenberg_file(title, author, body_lines, crlf):
    upper = title.upper()
    lines = [
        f"The Project Gutenberg eBook of {title}, by {author}",
        "",
        "This eBook is for the use of anyone anywhere at no cost and with",
        "almost no restrictions whatsoever.",
        "",
        f"Title: {title}",
        f"Author: {author}",
        "",
        f"*** START OF THE PROJECT GUTENBERG EBOOK {upper} ***",
        "",
        "",
        "",
        *body_lines,
        "",
        f"*** END OF THE PROJECT GUTENBERG EBOOK {upper} ***",
        "",
        "Updated editions will replace the previous one.",
        "",
    ]
    sep = "\r\n" if crlf else "\n"
    return sep.join(lines)


PROBES = {
    # concept-bearing noun phrases and short sentences
    "female": ["The girl", "The young lady", "Her sister", "The woman",
               "Miss Bennet", "The maiden aunt", "A pretty girl",
               "The old woman", "She smiled", "The governess herself",
               "Her ladyship", "The daughters"],
    "male": ["The boy", "The young man", "His brother", "The gentleman",
             "Mr. Darcy", "The old man", "He frowned", "A handsome man",
             "His lordship", "The sons", "The clergyman himself",
             "Sir Thomas"],
    "family": ["The whole family", "Their children", "The household",
               "Her relations", "The family home", "Kith and kin",
               "The old family", "Family ties", "The cousins",
               "The grandchildren"],
    "marriage": ["The wedding day", "An engagement", "The marriage settlement",
                 "The bride", "A proposal", "The betrothal",
                 "Married life", "The wedding ring", "A good match",
                 "The ceremony at church"],
    "wealth": ["Ten thousand pounds", "A large fortune", "The estate",
               "His income", "The inheritance", "Great riches",
               "A small annuity", "The family jewels", "Debts and money",
               "A rich man"],
    "emotion": ["Bitter tears", "A burst of joy", "Deep sorrow",
                "She wept", "His anger", "Grief and despair",
                "A trembling voice", "Sudden delight", "Fear and anxiety",
                "A heavy heart"],
    "love": ["True love", "She loved him", "Tender affection",
             "A lover's vow", "Passion", "His beloved", "Love letters",
             "Devoted hearts", "A romance", "Fond attachment"],
    "scandal": ["The elopement", "A great scandal", "Disgrace and ruin",
                "Whispered gossip", "A ruined reputation", "The secret affair",
                "Public shame", "A shocking rumour", "The infamous letter",
                "Dishonour"],
    "duty": ["Her duty", "A solemn obligation", "The call of conscience",
             "Moral principle", "His responsibility", "A sacred promise",
             "Obedience", "The path of duty", "Christian duty",
             "Bound by honour"],
    "class": ["The servants", "A mere tradesman", "The nobility",
              "Low connections", "The gentry", "A humble cottager",
              "The working people", "Noble birth", "Beneath her station",
              "The aristocracy"],
    "society": ["Polite society", "The whole neighbourhood",
                "The assembly rooms", "Fashionable company",
                "The county", "Public opinion", "The London season",
                "Good manners", "Social calls", "The parish"],
}

MULTI = [
    ("His wife", ["marriage", "female", "male"]),
    ("Her husband", ["marriage", "male", "female"]),
    ("The widow", ["female", "marriage"]),
    ("Her mother", ["female", "family"]),
    ("His father", ["male", "family"]),
    ("The rich heiress", ["female", "wealth"]),
    ("A poor gentleman", ["male", "wealth", "class"]),
    ("The bride's dowry", ["marriage", "wealth", "female"]),
    ("A loving husband", ["love", "marriage", "male"]),
    ("The jilted lover wept", ["love", "emotion", "scandal"]),
    ("Her mother's duty", ["duty", "family", "female"]),
    ("The squire's son", ["male", "family", "class"]),
    ("A fashionable wedding", ["marriage", "society"]),
    ("The servant girl", ["female", "class"]),
    ("Gossip about the marriage", ["scandal", "marriage", "society"]),
    ("His sense of duty", ["duty", "male"]),
    ("A marriage for money", ["marriage", "wealth"]),
    ("The family fortune", ["family", "wealth"]),
    ("A daughter's love", ["love", "family", "female"]),
    ("The proud nobleman", ["male", "class", "emotion"]),
    ("She married for love", ["female", "marriage", "love"]),
    ("His disgraced brother", ["male", "family", "scandal"]),
    ("The ladies of the town", ["female", "society"]),
    ("The gentlemen at the club", ["male", "society", "class"]),
    ("Her wounded pride", ["female", "emotion"]),
]


def probes():
    records = []
    n = 0
    for concept, texts in PROBES.items():
        for text in texts:
            labels = [concept]
            lower = text.lower()
            if concept != "female" and any(t in lower.split() for t in ("her", "she", "miss", "lady", "girl", "woman")):
                labels.append("female")
            if concept != "male" and any(t in lower.split() for t in ("his", "he", "mr.", "man", "boy", "gentleman")):
                labels.append("male")
            n += 1
            records.append({"id": f"p{n:03d}", "text": text, "labels": labels})
    for text, labels in MULTI:
        n += 1
        records.append({"id": f"p{n:03d}", "text": text, "labels": labels})
    return records


def train_vocab(corpus_files, out_dir, vocab_size):
    from tokenizers import ByteLevelBPETokenizer
    tok = ByteLevelBPETokenizer()
    tok.train(files=[str(f) for f in corpus_files], vocab_size=vocab_size,
              min_frequency=2, special_tokens=["<|endoftext|>"],
              show_progress=False)
    tok.save_model(str(out_dir))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", default="data/toy")
    ap.add_argument("--seed", type=int, default=1817)
    ap.add_argument("--vocab-size", type=int, default=1000)
    args = ap.parse_args()

    root = pathlib.Path(args.root)
    corpus = root / "corpus"
    corpus.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)
    manifest = []
    files = []
    for i, (doc_id, title, author, role) in enumerate(NOVELS):
        body = novel_body(rng, chapters=3, paragraphs_per_chapter=5)
        text = gutenberg_file(title, author, body, crlf=(i % 3 == 1))
        path = corpus / f"{doc_id}.txt"
        path.write_bytes(text.encode("utf-8"))
        files.append(path)
        manifest.append({"id": doc_id, "title": title, "author": author,
                         "filename": path.name, "split": role})
    (corpus / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    with open(root / "probes.jsonl", "w") as f:
        for rec in probes():
            f.write(json.dumps(rec) + "\n")

    vocab_dir = root / "vocab"
    vocab_dir.mkdir(parents=True, exist_ok=True)
    train_vocab(files, vocab_dir, args.vocab_size)


if __name__ == "__main__":
    main()
