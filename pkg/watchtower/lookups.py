BOS = "<bos>"
QUERY_START = "<q>"
QUERY_END = "</q>"
RESPONSE_END = "</r>"
STREAM_EOS = "<eos>"

ROLE_TOKENS = [BOS, QUERY_START, QUERY_END, RESPONSE_END]

CATEGORIES = [
    "fighting",
    "arson",
    "explosion",
    "road_accident",
    "stealing",
    "shooting"
]

TASK_MODES = ["VAP", "VAD", "VAA"]

## prompt word sent between <q> ... </q> at stream start
TASK_WORDS = {
    "VAP": "predict",
    "VAD": "detect",
    "VAA": "analyze",
    "CAPTION": "describe"
}

DESCRIPTIONS = {
    "fighting": ["people", "fighting"],
    "arson": ["fire", "set"],
    "explosion": ["blast", "smoke"],
    "road_accident": ["cars", "collide"],
    "stealing": ["person", "steals"],
    "shooting": ["gun", "fired"]
}

VAP_LEAD_WORD = "warning"
VAD_LEAD_WORD = "alert"
NORMAL_CAPTION = ["normal", "all", "calm"]

### Five-whys-two-hows query families ###########################################
QUERY_FAMILIES = ["what", "why", "who", "where", "when", "how", "how_much"]

QUERY_TEMPLATES = {
    "what": ["what", "happening"],
    "why": ["why", "happening"],
    "who": ["who", "involved"],
    "where": ["where", "happening"],
    "when": ["when", "started"],
    "how": ["how", "happening"],
    "how_much": ["how", "severe"]
}

CAUSES = {
    "fighting": "dispute",
    "arson": "intent",
    "explosion": "gas",
    "road_accident": "speed",
    "stealing": "greed",
    "shooting": "conflict"
}

ACTORS = {
    "fighting": "crowd",
    "arson": "person",
    "explosion": "unknown",
    "road_accident": "drivers",
    "stealing": "thief",
    "shooting": "gunman"
}

PLACES = {
    "fighting": "street",
    "arson": "building",
    "explosion": "building",
    "road_accident": "road",
    "stealing": "shop",
    "shooting": "street"
}

SEVERITY = {
    "fighting": "medium",
    "arson": "high",
    "explosion": "high",
    "road_accident": "high",
    "stealing": "low",
    "shooting": "high"
}

## frames elapsed since onset -> coarse word used by "when" answers
ELAPSED_BUCKETS = [
    (2, "just"),
    (6, "recently"),
    (None, "earlier")
]

ANSWER_FILLERS = ["is", "caused", "by", "in", "started", "severity"]
