"""Hand-written (raw, expected) pairs for note normalization."""

NORMALIZATION_CASES = [
    ("Pt stable for 2 hr(s)", "pt stable for 2 hours"),
    ("Sjögren, æther", "sjogren, aether"),
    ("", ""),
    ("HRS", "hours"),
    ("3 hrs ago", "3 hours ago"),
    ("1 hr", "1 hours"),
    ("shrs", "shrs"),
    ("hr.", "hours."),
    ("5 min(s)", "5 minutes"),
    ("10 mins", "10 minutes"),
    ("2 wk(s)", "2 weeks"),
    ("3 wks", "3 weeks"),
    ("1 wk", "1 weeks"),
    ("4 yr(s)", "4 years"),
    ("yrs", "years"),
    ("yr", "years"),
    ("45 y/o male", "45 year old male"),
    ("45 yo male", "45 year old male"),
    ("h/o asthma", "history of asthma"),
    ("Hx of MI", "history of mi"),
    ("s/p appendectomy", "status post appendectomy"),
    ("c/o pain", "complains of pain"),
    ("b/l edema", "bilateral edema"),
    ("r/o PE", "rule out pe"),
    ("SOB on exertion", "shortness of breath on exertion"),
    ("n/v x2", "nausea and vomiting x2"),
    ("abd pain", "abdominal pain"),
    ("abdomen", "abdomen"),
    ("Café", "cafe"),
    ("naïve", "naive"),
    ("Señora", "senora"),
    ("Søren", "soeren"),
    ("blåbær", "blaabaer"),
    ("ÆTHER", "aether"),
    ("Øre", "oere"),
    ("Ångström", "aangstrom"),
    ("Ærø", "aeroe"),
    ("crème brûlée", "creme brulee"),
    ("hx/hr", "history/hours"),
    ("(hrs)", "(hours)"),
    ("pt", "pt"),
    ("PT c/o SOB x 2 hrs", "pt complains of shortness of breath x 2 hours"),
    ("minutes", "minutes"),
    ("mins.", "minutes."),
    ("hrs,hrs", "hours,hours"),
    ("résumé", "resume"),
    ("ÜBER", "uber"),
    ("hr_1", "hr_1"),
    ("hr1", "hr1"),
    ("  spaced   hrs ", "  spaced   hours "),
    ("ﬁnding", "finding"),
]
