#!/usr/bin/env python3
"""Regenerates the bundled fixture corpus.

Writes fragments.jsonl, pairs.jsonl, embeddings.tfem (D=16, cls pooling),
mock_verdicts.json and leaves config.toml untouched. Output is a pure
function of SEED; rerunning reproduces the committed files byte for byte.

Clone grades are produced by construction from a set of Java method
families:
  1  comments and layout changed
  2  identifiers and literals changed
  3  as 2, plus one inserted statement
  4  as 2, plus two insertions and one deletion
  5  as 2, plus three insertions and two deletions
  6  an independent implementation of the same behaviour
  0  a method from a different family
"""

import json
import random
import re
import struct
import zlib
from pathlib import Path

SEED = 20240917
DIM = 16
PROJECTS = 12
PAIRS_PER_PROJECT = 5
OUT = Path(__file__).resolve().parent

FAMILIES = [
    {
        "name": "copyFile",
        "base": """public static void copyFile(File source, File target) throws IOException {
    FileInputStream input = new FileInputStream(source);
    FileOutputStream output = new FileOutputStream(target);
    byte[] buffer = new byte[4096];
    int read;
    while ((read = input.read(buffer)) != -1) {
        output.write(buffer, 0, read);
    }
    output.flush();
    input.close();
    output.close();
}""",
        "alt": """public static void copyFile(File source, File target) throws IOException {
    FileChannel in = new FileInputStream(source).getChannel();
    FileChannel out = new FileOutputStream(target).getChannel();
    try {
        long size = in.size();
        long position = 0;
        while (position < size) {
            position += in.transferTo(position, size - position, out);
        }
    } finally {
        in.close();
        out.close();
    }
}""",
        "rename": {"source": "src", "target": "dest", "input": "in", "output": "out", "buffer": "chunk", "read": "count", "4096": "8192"},
    },
    {
        "name": "bubbleSort",
        "base": """public static void bubbleSort(int[] values) {
    int n = values.length;
    for (int i = 0; i < n - 1; i++) {
        for (int j = 0; j < n - i - 1; j++) {
            if (values[j] > values[j + 1]) {
                int swap = values[j];
                values[j] = values[j + 1];
                values[j + 1] = swap;
            }
        }
    }
}""",
        "alt": """public static void bubbleSort(int[] values) {
    for (int start = 0; start < values.length; start++) {
        int smallest = start;
        for (int k = start + 1; k < values.length; k++) {
            if (values[k] < values[smallest]) {
                smallest = k;
            }
        }
        int held = values[start];
        values[start] = values[smallest];
        values[smallest] = held;
    }
}""",
        "rename": {"values": "data", "n": "len", "i": "outer", "j": "inner", "swap": "tmp"},
    },
    {
        "name": "fibonacci",
        "base": """public static long fibonacci(int count) {
    if (count <= 1) {
        return count;
    }
    long previous = 0;
    long current = 1;
    for (int step = 2; step <= count; step++) {
        long next = previous + current;
        previous = current;
        current = next;
    }
    return current;
}""",
        "alt": """public static long fibonacci(int count) {
    long[] memo = new long[Math.max(2, count + 1)];
    memo[0] = 0;
    memo[1] = 1;
    return fill(memo, count);
}
private static long fill(long[] memo, int k) {
    if (k < 2 || memo[k] != 0) {
        return memo[k];
    }
    memo[k] = fill(memo, k - 1) + fill(memo, k - 2);
    return memo[k];
}""",
        "rename": {"count": "limit", "previous": "a", "current": "b", "step": "idx", "next": "sum", "1": "1L"},
    },
    {
        "name": "md5Hex",
        "base": """public static String md5Hex(String text) throws NoSuchAlgorithmException {
    MessageDigest digest = MessageDigest.getInstance("MD5");
    byte[] hash = digest.digest(text.getBytes());
    StringBuilder builder = new StringBuilder();
    for (byte b : hash) {
        String hex = Integer.toHexString(0xff & b);
        if (hex.length() == 1) {
            builder.append('0');
        }
        builder.append(hex);
    }
    return builder.toString();
}""",
        "alt": """public static String md5Hex(String text) throws NoSuchAlgorithmException {
    MessageDigest md = MessageDigest.getInstance("MD5");
    md.update(text.getBytes(StandardCharsets.UTF_8));
    BigInteger number = new BigInteger(1, md.digest());
    String result = number.toString(16);
    while (result.length() < 32) {
        result = "0" + result;
    }
    return result;
}""",
        "rename": {"text": "input", "digest": "algorithm", "hash": "raw", "builder": "sb", "hex": "part", "b": "octet"},
    },
    {
        "name": "readLines",
        "base": """public static List<String> readLines(String path) throws IOException {
    List<String> lines = new ArrayList<String>();
    BufferedReader reader = new BufferedReader(new FileReader(path));
    String line = reader.readLine();
    while (line != null) {
        lines.add(line.trim());
        line = reader.readLine();
    }
    reader.close();
    return lines;
}""",
        "alt": """public static List<String> readLines(String path) throws IOException {
    Scanner scanner = new Scanner(new File(path));
    List<String> collected = new LinkedList<String>();
    try {
        while (scanner.hasNextLine()) {
            collected.add(scanner.nextLine().trim());
        }
    } finally {
        scanner.close();
    }
    return collected;
}""",
        "rename": {"path": "fileName", "lines": "result", "reader": "br", "line": "current"},
    },
    {
        "name": "binarySearch",
        "base": """public static int binarySearch(int[] sorted, int key) {
    int low = 0;
    int high = sorted.length - 1;
    while (low <= high) {
        int mid = (low + high) >>> 1;
        if (sorted[mid] < key) {
            low = mid + 1;
        } else if (sorted[mid] > key) {
            high = mid - 1;
        } else {
            return mid;
        }
    }
    return -1;
}""",
        "alt": """public static int binarySearch(int[] sorted, int key) {
    return search(sorted, key, 0, sorted.length - 1);
}
private static int search(int[] arr, int key, int from, int to) {
    if (from > to) {
        return -1;
    }
    int middle = from + (to - from) / 2;
    if (arr[middle] == key) {
        return middle;
    }
    return arr[middle] < key ? search(arr, key, middle + 1, to) : search(arr, key, from, middle - 1);
}""",
        "rename": {"sorted": "arr", "key": "target", "low": "lo", "high": "hi", "mid": "m", "1": "1"},
    },
    {
        "name": "isPrime",
        "base": """public static boolean isPrime(int number) {
    if (number < 2) {
        return false;
    }
    if (number % 2 == 0) {
        return number == 2;
    }
    for (int divisor = 3; divisor * divisor <= number; divisor += 2) {
        if (number % divisor == 0) {
            return false;
        }
    }
    return true;
}""",
        "alt": """public static boolean isPrime(int number) {
    if (number < 2) {
        return false;
    }
    boolean[] composite = new boolean[number + 1];
    for (int p = 2; (long) p * p <= number; p++) {
        if (!composite[p]) {
            for (int q = p * p; q <= number; q += p) {
                composite[q] = true;
            }
        }
    }
    return !composite[number];
}""",
        "rename": {"number": "value", "divisor": "d", "2": "2", "3": "3"},
    },
    {
        "name": "wordCount",
        "base": """public static Map<String, Integer> wordCount(String text) {
    Map<String, Integer> counts = new HashMap<String, Integer>();
    String[] words = text.toLowerCase().split("\\\\s+");
    for (String word : words) {
        if (word.isEmpty()) {
            continue;
        }
        Integer seen = counts.get(word);
        counts.put(word, seen == null ? 1 : seen + 1);
    }
    return counts;
}""",
        "alt": """public static Map<String, Integer> wordCount(String text) {
    Map<String, Integer> counts = new TreeMap<String, Integer>();
    StringTokenizer tokens = new StringTokenizer(text.toLowerCase());
    while (tokens.hasMoreTokens()) {
        String token = tokens.nextToken();
        counts.merge(token, 1, Integer::sum);
    }
    return counts;
}""",
        "rename": {"text": "body", "counts": "freq", "words": "parts", "word": "w", "seen": "prior"},
    },
]

INSERTS = [
    "long startedAt = System.nanoTime();",
    "int attempts = 0;",
    "LOG.fine(\"entering method\");",
    "boolean verbose = Boolean.getBoolean(\"debug\");",
    "Objects.requireNonNull(LOCK);",
    "String label = \"step\";",
]

COMMENTS = [
    "// keep behaviour identical to the legacy helper",
    "/* caller owns the resources */",
    "// see issue tracker for history",
]


def rename(code, mapping, rng):
    out = code
    for old, new in mapping.items():
        if old == new:
            continue
        out = re.sub(r"\b%s\b" % re.escape(old), new, out)
    # nudge one integer literal so literals differ too
    nums = [m for m in re.finditer(r"\b(\d+)\b", out) if m.group(1) not in ("0", "1")]
    if nums:
        m = rng.choice(nums)
        out = out[: m.start()] + str(int(m.group(1)) + 1) + out[m.end():]
    return out


def body_lines(code):
    """Indices of simple statements safe to delete."""
    lines = code.split("\n")
    return [
        i
        for i, l in enumerate(lines)
        if l.strip().endswith(";") and "{" not in l and "}" not in l and not l.strip().startswith("return")
    ]


def edit(code, inserts, deletes, rng):
    lines = code.split("\n")
    for _ in range(deletes):
        candidates = body_lines("\n".join(lines))
        if not candidates:
            break
        del lines[rng.choice(candidates)]
    for k in range(inserts):
        at = rng.randint(1, len(lines) - 1)
        indent = re.match(r"\s*", lines[at]).group(0) or "    "
        lines.insert(at, indent + INSERTS[(k + at) % len(INSERTS)])
    return "\n".join(lines)


def relayout(code, rng):
    lines = code.split("\n")
    out = []
    for i, l in enumerate(lines):
        if i > 0 and i % 3 == 0:
            out.append("    " + rng.choice(COMMENTS))
        out.append(l.replace("    ", "  "))
    return "\n".join(out)


def variant(fam, label, rng):
    if label == 1:
        return relayout(fam["base"], rng)
    if label == 6:
        return rename(fam["alt"], {}, rng)
    code = rename(fam["base"], fam["rename"], rng)
    ins, dels = {2: (0, 0), 3: (1, 0), 4: (2, 1), 5: (3, 2)}[label]
    return edit(code, ins, dels, rng)


def suffixed(code, name, tag):
    return re.sub(r"\b%s\b" % name, name + tag, code, count=1)


def tfem(records, dim, pooling=0):
    out = bytearray(b"TFEM")
    out += struct.pack("<IIB", 1, dim, pooling)
    for fid, vec in sorted(records.items()):
        rec = struct.pack("<H", len(fid.encode())) + fid.encode() + struct.pack("<%df" % dim, *vec)
        out += rec + struct.pack("<I", zlib.crc32(rec) & 0xFFFFFFFF)
    return bytes(out)


def main():
    rng = random.Random(SEED)
    centers = [[rng.gauss(0.0, 1.0) for _ in range(DIM)] for _ in FAMILIES]
    spread = {0: 0.05, 1: 0.05, 2: 0.1, 3: 0.2, 4: 0.35, 5: 0.5, 6: 0.8}

    fragments, pairs, vectors, verdicts = [], [], {}, {}
    for p in range(PROJECTS):
        project = "proj%02d" % p
        for j in range(PAIRS_PER_PROJECT):
            label = (p * PAIRS_PER_PROJECT + j) % 7
            fi = (p * 3 + j) % len(FAMILIES)
            fam = FAMILIES[fi]
            tag = "P%dN%d" % (p, j)
            left = suffixed(fam["base"], fam["name"], tag)
            if label == 0:
                other = FAMILIES[(fi + 1 + j) % len(FAMILIES)]
                right = suffixed(rename(other["base"], other["rename"], rng), other["name"], tag)
                right_center = centers[FAMILIES.index(other)]
            else:
                right = suffixed(variant(fam, label, rng), fam["name"], tag)
                right_center = centers[fi]
            lid, rid = "%s_%d_a" % (project, j), "%s_%d_b" % (project, j)
            pid = "%s_pair%d" % (project, j)
            fragments += [
                {"fragment_id": lid, "project_id": project, "source": left},
                {"fragment_id": rid, "project_id": project, "source": right},
            ]
            pairs.append({"pair_id": pid, "left": lid, "right": rid, "label": label})
            vectors[lid] = [c + rng.gauss(0.0, 0.05) for c in centers[fi]]
            vectors[rid] = [c + rng.gauss(0.0, spread[label]) for c in right_center]
            probs = [0.0] * 7
            probs[label] = 1.0
            verdicts[pid] = {
                "mode": "prior-guided",
                "thought": "compared control flow and data flow of both methods",
                "prediction": label,
                "confidence": 0.9,
                "explanation": "fixture oracle verdict",
                "probabilities": probs,
            }

    # Two rows the curation filter must drop: a fragment under 200 chars and
    # a whitespace-only duplicate of an existing fragment.
    fragments.append({"fragment_id": "proj00_short", "project_id": "proj00", "source": "int one() { return 1; }"})
    dup = fragments[0]
    fragments.append(
        {"fragment_id": "proj00_dup", "project_id": "proj00", "source": dup["source"].replace("    ", "\t")}
    )
    pairs.append({"pair_id": "proj00_short_pair", "left": "proj00_short", "right": dup["fragment_id"], "label": 0})
    pairs.append({"pair_id": "proj00_dup_pair", "left": "proj00_dup", "right": "proj00_1_a", "label": 0})

    for f in fragments:
        assert f["fragment_id"] in ("proj00_short",) or len(f["source"]) >= 200, f["fragment_id"]

    with open(OUT / "fragments.jsonl", "w") as fh:
        for f in fragments:
            fh.write(json.dumps(f) + "\n")
    with open(OUT / "pairs.jsonl", "w") as fh:
        for pr in pairs:
            fh.write(json.dumps(pr) + "\n")
    vectors = {k: [struct.unpack("<f", struct.pack("<f", x))[0] for x in v] for k, v in vectors.items()}
    (OUT / "embeddings.tfem").write_bytes(tfem(vectors, DIM))
    with open(OUT / "mock_verdicts.json", "w") as fh:
        json.dump(verdicts, fh, indent=1, sort_keys=True)
        fh.write("\n")


if __name__ == "__main__":
    main()
