"""Hand-built extraction corpus: free-form text and the exact fields the
rule-based normalizer must recover.

Each case is (text, expression, (valence, arousal) or None, active AU set
or None).  A case with all three fields None must come back unparseable.
Expected values were derived by hand from the documented extraction rules:
longest lexicon term wins for the expression, labeled decimals for valence
and arousal (rejected as a pair when either leaves [-1, 1]), and AU<id>
mentions filtered to the vocabulary.
"""

from seke.affect import ExpressionLabel as E

GOLDEN_CASES = [
    (
        "The person looks happy (valence 0.7, arousal 0.4) with AU6 and AU12.",
        E.HAPPINESS, (0.7, 0.4), {6, 12},
    ),
    (
        "A clearly sad face; valence -0.6 and arousal 0.2; AU1, AU4 and AU15 are visible.",
        E.SADNESS, (-0.6, 0.2), {1, 4, 15},
    ),
    (
        "Neutral expression, valence 0.0, arousal 0.0, no action units active.",
        E.NEUTRAL, (0.0, 0.0), None,
    ),
    (
        "Surprised! Eyes wide open (AU5), jaw dropped (AU25, AU26); valence 0.3, arousal 0.9.",
        E.SURPRISE, (0.3, 0.9), {5, 25, 26},
    ),
    (
        "The face shows anger with brow lowering (AU4) and lid tightening (AU7). "
        "Valence: -0.8, arousal: 0.7.",
        E.ANGER, (-0.8, 0.7), {4, 7},
    ),
    (
        "Disgusted expression: nose wrinkling AU9 plus a raised upper lip AU10; "
        "valence -0.5, arousal 0.35.",
        E.DISGUST, (-0.5, 0.35), {9, 10},
    ),
    (
        "Fearful look: AU1, AU2, AU5 and AU20 all present. Valence -0.7; arousal 0.85.",
        E.FEAR, (-0.7, 0.85), {1, 2, 5, 20},
    ),
    (
        "A contemptuous smirk, unilateral AU12 with a hint of AU14; valence -0.2, arousal 0.1.",
        E.CONTEMPT, (-0.2, 0.1), {12, 14},
    ),
    ("happy", E.HAPPINESS, None, None),
    ("AU6 AU12 only; nothing else can be stated.", None, None, {6, 12}),
    ("valence 0.25 arousal -0.5", None, (0.25, -0.5), None),
    ("There is no face visible in this image.", None, None, None),
    (
        "The subject seems unhappy; AU99 looks active; valence -0.4, arousal 0.0.",
        E.SADNESS, (-0.4, 0.0), None,
    ),
    (
        "Expression: HAPPINESS. Valence=0.55, Arousal=0.30. Active: au6, au12.",
        E.HAPPINESS, (0.55, 0.3), {6, 12},
    ),
    (
        "Slightly scared, almost surprised; the dominant reading stays fear. "
        "AU1 + AU2 + AU5; valence -0.3, arousal 0.6.",
        E.SURPRISE, (-0.3, 0.6), {1, 2, 5},
    ),
    (
        "The valence value sits at +0.9 while the arousal value is +0.8; "
        "a joyful face with AU6, AU12 and AU25.",
        E.HAPPINESS, (0.9, 0.8), {6, 12, 25},
    ),
    (
        "Angry brows but a disgusted mouth: AU4, AU5, AU7, AU9 and tight lips AU23. "
        "valence -0.9, arousal 0.8.",
        E.DISGUST, (-0.9, 0.8), {4, 5, 7, 9, 23},
    ),
    (
        "An odd shot; valence 2.5 and arousal 0.1 were reported by the tool.",
        None, None, None,
    ),
    (
        "A calm, neutral face. Valence 0.05; arousal -0.10. AU 25 slightly parted lips.",
        E.NEUTRAL, (0.05, -0.1), {25},
    ),
    (
        "Mixed signals: a happy mouth (AU12) under fearful eyes (AU5); overall "
        "happiness prevails. Valence 0.2, arousal 0.55.",
        E.HAPPINESS, (0.2, 0.55), {5, 12},
    ),
]
