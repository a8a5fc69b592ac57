#!/usr/bin/env python3
"""Regenerates the bundled fixtures under fixtures/.

Every fixture here is produced by independent reference implementations
(the `sentencepiece` trainer/encoder, its generated protobuf bindings and the
`safetensors` python package) so the Rust code is checked against outputs it
did not produce itself.

    python3 scripts/gen_fixtures.py

Requires: sentencepiece, protobuf, numpy, safetensors.
"""

import io
import os
import random
import struct

import numpy as np
import sentencepiece as spm
from safetensors.numpy import save_file
from sentencepiece import sentencepiece_model_pb2 as pb

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "fixtures")

NORMAL, UNKNOWN, CONTROL, USER_DEFINED, UNUSED, BYTE = 1, 2, 3, 4, 5, 6


def write(path, data, mode="wb"):
    path = os.path.join(ROOT, path)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, mode) as f:
        f.write(data)


# ---------------------------------------------------------------------------
# Synthetic Indonesian-like text
# ---------------------------------------------------------------------------

WORDS = """
saya kamu dia kami kita mereka makan minum tidur pergi datang pulang rumah
sekolah pasar kantor jalan kota desa pulau laut gunung sungai hutan nasi
ikan ayam sayur buah air teh kopi susu roti gula garam besar kecil baru lama
baik buruk cepat lambat tinggi rendah panjang pendek banyak sedikit dan atau
tetapi karena jika ketika sudah belum akan sedang tidak bukan juga hanya
sangat lebih paling dengan untuk dari ke di pada dalam luar atas bawah
pemerintah masyarakat pendidikan kesehatan ekonomi politik budaya sejarah
penelitian pembangunan perusahaan pekerjaan kehidupan keluarga anak adik
bapak guru murid dokter petani nelayan pedagang presiden menteri rakyat
indonesia jakarta bandung surabaya medan bali sumatera jawa kalimantan
membaca menulis berbicara mendengar melihat membeli menjual membuat
menggunakan mengatakan memberikan menunjukkan menjadi merupakan adalah
yang ini itu tersebut setiap semua beberapa tahun bulan hari minggu pagi
siang sore malam sekarang nanti kemarin besok hujan panas dingin angin
""".split()

ENGLISH = """
the of and to in is was for on that with as by at from this have are be
it not or which his had but they you one all were we there when their an
she been has would more will if who no out so said what up its about into
than them can only other new some could time these two may then do first
any my now such like our over man me even most made after also did many
before must through back years where much your way well down should because
each just those people how too little state good very make world still own
see men work long get here between both life being under never day same
another know while last might us great old year off come since against go
""".split()


def sentence(rng, words):
    n = rng.randint(3, 14)
    ws = [rng.choice(words) for _ in range(n)]
    ws[0] = ws[0].capitalize()
    s = " ".join(ws)
    if rng.random() < 0.3:
        k = rng.randint(1, n - 1)
        ws2 = s.split(" ")
        ws2[k - 1] += ","
        s = " ".join(ws2)
    if rng.random() < 0.15:
        s += " " + str(rng.randint(1, 2024))
    return s + rng.choice([".", ".", ".", "?", "!"])


# ---------------------------------------------------------------------------
# Tokenizer oracle fixtures
# ---------------------------------------------------------------------------


def train(sentences, **kw):
    buf = io.BytesIO()
    spm.SentencePieceTrainer.train(
        sentence_iterator=iter(sentences),
        model_writer=buf,
        model_type="unigram",
        character_coverage=1.0,
        pad_id=0,
        eos_id=1,
        unk_id=2,
        bos_id=-1,
        num_threads=1,
        seed_sentencepiece_size=100000,
        minloglevel=2,
        **kw,
    )
    return buf.getvalue()


def tokenizer_fixtures():
    rng = random.Random(20240501)
    train_sents = [sentence(rng, WORDS + ENGLISH[:40]) for _ in range(3000)]
    model = train(train_sents, vocab_size=600)
    write("tokenizer/reference.model", model)
    write("sp/trained.model", model)

    eval_rng = random.Random(7)
    eval_sents = [sentence(eval_rng, WORDS + ENGLISH[:40]) for _ in range(598)]
    # Two sentences whose characters are rewritten by NFKC in the reference
    # normalizer (full-width letters and a ligature).
    eval_sents.insert(101, "Saya makan ＮＡＳＩ goreng di rumah.")
    eval_sents.insert(402, "Mereka ﬁnal pulang ke desa.")
    sp = spm.SentencePieceProcessor(model_proto=model)
    ids = [sp.encode(s) for s in eval_sents]
    write("tokenizer/sentences.txt", ("\n".join(eval_sents) + "\n").encode())
    write(
        "tokenizer/reference_ids.txt",
        ("\n".join(" ".join(map(str, x)) for x in ids) + "\n").encode(),
    )

    byte_model = train(
        train_sents[:800],
        vocab_size=350, hard_vocab_limit=False,
        byte_fallback=True,
        user_defined_symbols=["<sep>", "<cls>"],
    )
    write("sp/byte_fallback.model", byte_model)


# ---------------------------------------------------------------------------
# Protobuf fixtures
# ---------------------------------------------------------------------------


def varint(n):
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def field(num, wire, payload):
    key = varint(num << 3 | wire)
    if wire == 2:
        return key + varint(len(payload)) + payload
    return key + payload


def proto_fixtures():
    write("sp/empty.model", b"")

    m = pb.ModelProto()
    p = m.pieces.add()
    p.piece, p.score, p.type = "<unk>", 0.0, UNKNOWN
    p = m.pieces.add()
    p.piece, p.score = "▁a", -1.5
    write("sp/two_piece.model", m.SerializeToString())

    # Hand-assembled: a normalizer spec before the pieces, a piece with an
    # explicit NORMAL kind and no score, a piece carrying an unknown
    # sub-field, a 64-bit field and an unknown varint field at the end.
    norm = field(1, 2, b"identity") + field(3, 0, varint(1))
    pieces = [
        field(1, 2, b"<unk>") + field(2, 5, struct.pack("<f", 0.0)) + field(3, 0, varint(2)),
        field(1, 2, "▁x".encode()) + field(3, 0, varint(1)),
        field(1, 2, b"y") + field(2, 5, struct.pack("<f", -2.25)) + field(7, 0, varint(300)),
    ]
    body = field(3, 2, norm)
    body += b"".join(field(1, 2, x) for x in pieces)
    body += field(9, 1, struct.pack("<d", 3.5))
    body += field(99, 0, varint(123456))
    write("sp/handmade.model", body)


# ---------------------------------------------------------------------------
# Toy end-to-end pipeline fixture (V=32, d=4)
# ---------------------------------------------------------------------------

TOY_PIECES = [
    ("<pad>", 0.0, CONTROL),
    ("</s>", 0.0, CONTROL),
    ("<unk>", 0.0, UNKNOWN),
    ("▁", -3.0, NORMAL),
    ("a", -3.1, NORMAL),
    ("i", -3.2, NORMAL),
    ("u", -3.3, NORMAL),
    ("e", -3.4, NORMAL),
    ("o", -3.5, NORMAL),
    ("n", -3.6, NORMAL),
    ("s", -3.7, NORMAL),
    ("k", -3.8, NORMAL),
    ("m", -3.9, NORMAL),
    ("t", -4.0, NORMAL),
    ("d", -4.1, NORMAL),
    ("r", -4.2, NORMAL),
    ("h", -4.3, NORMAL),
    ("g", -4.4, NORMAL),
    ("y", -4.5, NORMAL),
    ("▁saya", -2.0, NORMAL),
    ("▁makan", -2.1, NORMAL),
    ("▁nasi", -2.2, NORMAL),
    ("an", -2.3, NORMAL),
    ("▁the", -2.4, NORMAL),
    ("▁is", -2.5, NORMAL),
    ("ng", -2.6, NORMAL),
    ("▁di", -2.7, NORMAL),
    ("er", -2.8, NORMAL),
    ("▁dan", -2.9, NORMAL),
    ("▁and", -3.05, NORMAL),
    ("▁rumah", -2.15, NORMAL),
    ("▁kami", -2.25, NORMAL),
]

TOY_TARGET = [
    "saya makan nasi",
    "kami makan ikan di rumah",
    "saya dan kami",
    "anak makan nasi dan ikan",
    "kami minum teh di rumah",
    "saya tidur di rumah",
    "kami makan nasi dan minum teh",
    "saya makan",
    "anak dan adik makan nasi",
    "kami di rumah",
    "saya minum susu",
    "ikan dan nasi",
    "rumah kami",
    "saya dan anak makan",
    "kami tidur",
    "nasi dan teh",
    "saya makan nasi di rumah",
    "kami dan anak minum",
    "adik makan",
    "saya di rumah dan kami makan",
]

TOY_SECONDARY = [
    "the dog is good",
    "the man and the dog",
    "the tea is hot",
    "this is the end",
    "the king is red",
    "the dog and the man",
    "he is good",
    "the rain is here",
    "the man is sad",
    "dog and man",
    "the end",
    "the king and the dog",
    "tea is good",
    "the sun is hot",
    "the man is here",
    "he and the dog",
    "the dog is sad",
    "the tea and the sun",
    "the red king",
    "the man",
]


def toy_fixtures():
    m = pb.ModelProto()
    for text, score, kind in TOY_PIECES:
        p = m.pieces.add()
        p.piece, p.score = text, score
        if kind != NORMAL:
            p.type = kind
    m.trainer_spec.model_type = pb.TrainerSpec.UNIGRAM
    m.trainer_spec.vocab_size = len(TOY_PIECES)
    m.normalizer_spec.name = "identity"
    m.normalizer_spec.add_dummy_prefix = True
    assert len(m.pieces) == 32
    model = m.SerializeToString()
    write("toy/toy.model", model)
    write("sp/toy.model", model)

    rng = np.random.default_rng(42)
    tensors = {
        "shared.weight": rng.standard_normal((32, 4)).astype(np.float32),
        "lm_head.weight": rng.standard_normal((32, 4)).astype(np.float32),
        "encoder.block.0.layer.0.SelfAttention.q.weight": rng.standard_normal((4, 4)).astype(np.float32),
        "encoder.final_layer_norm.weight": np.ones(4, dtype=np.float32),
    }
    path = os.path.join(ROOT, "toy", "toy.safetensors")
    save_file(tensors, path, metadata={"format": "pt"})

    write("toy/target.txt", "".join(f"{i + 1}\t{s}\n" for i, s in enumerate(TOY_TARGET)).encode())
    write("toy/secondary.txt", ("\n".join(TOY_SECONDARY) + "\n").encode())


if __name__ == "__main__":
    proto_fixtures()
    tokenizer_fixtures()
    toy_fixtures()
