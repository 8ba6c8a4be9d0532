import numpy as np
import pytest

from conftest import make_scene, rect_mask, write_clip_corpus

from avsegkit.annotations import center_of_mass, default_class_table
from avsegkit.audio import Waveform, apply_pan, load_wav, mix, trim
from avsegkit.builder import (
    AudioPool,
    BuildConfig,
    BuildError,
    ClipRef,
    ManifestEntry,
    SoundingInstance,
    assign_audio,
    build_manifest,
    dataset_stats,
    dominant_class,
    drop_sounds,
    eligible,
    item_rng,
    read_manifest,
    render_entry,
    score_image,
    split_entries,
    validate_manifest,
    write_manifest,
)

TABLE = default_class_table()
BIRD = TABLE.by_label("bird").class_id
CAT = TABLE.by_label("cat").class_id
DOG = TABLE.by_label("dog").class_id
CAR = TABLE.by_label("car").class_id
MALE = TABLE.by_label("male").class_id


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    pool = write_clip_corpus(root, TABLE, [BIRD, CAT, DOG, CAR, MALE],
                             clips_per_tag=1, seconds=1.0)
    return root, pool


def two_object_scene(image_id=1):
    return make_scene(image_id, [
        (1, DOG, (0, 4), (0, 4)),
        (2, CAT, (4, 8), (4, 8)),
    ])


def entry_of(scene, mode, seed, pool, **kwargs):
    return assign_audio(scene, mode, item_rng(seed, scene.image_id), pool,
                        TABLE, **kwargs)


# ---------------------------------------------------------------------------
# audio pool


def test_pool_index_roundtrip():
    pool = AudioPool({
        "dog barking": (ClipRef("a.wav", 10.0), ClipRef("b.wav", 12.5)),
        "cat meowing": (ClipRef("c.wav", 10.0),),
    })
    again = AudioPool.from_index_text(pool.to_index_text())
    assert again.clips == pool.clips


def test_pool_rejects_unknown_tag_against_table():
    with pytest.raises(BuildError, match="unknown tags"):
        AudioPool({"sneezing": (ClipRef("x.wav", 10.0),)}, TABLE)


def test_pool_index_parse_errors():
    with pytest.raises(BuildError, match="3 tab-separated"):
        AudioPool.from_index_text("dog barking\ta.wav\n")
    with pytest.raises(BuildError, match="duration"):
        AudioPool.from_index_text("dog barking\ta.wav\tlong\n")


# ---------------------------------------------------------------------------
# eligibility and priority


def test_eligibility_rules():
    diverse = make_scene(1, [
        (1, DOG, (0, 2), (0, 2)),
        (2, CAT, (2, 4), (2, 4)),
        (3, CAR, (4, 6), (4, 6)),
    ])
    assert eligible(diverse, "ss") and eligible(diverse, "ms")
    assert not eligible(diverse, "msmi")
    two_dogs = make_scene(2, [
        (1, DOG, (0, 2), (0, 2)),
        (2, DOG, (2, 4), (2, 4)),
    ])
    assert not eligible(two_dogs, "ms")
    assert eligible(two_dogs, "msmi")
    assert eligible(two_dogs, "ss")
    with pytest.raises(BuildError, match="subset"):
        eligible(diverse, "all")


def test_priority_matches_bruteforce_sort():
    scenes = [
        make_scene(10, [(1, DOG, (0, 2), (0, 2))]),
        make_scene(11, [(1, DOG, (0, 2), (0, 2)), (2, CAT, (2, 4), (2, 4))]),
        make_scene(12, [(1, DOG, (0, 2), (0, 2)), (2, DOG, (2, 4), (2, 4))]),
        make_scene(13, [(1, CAR, (0, 2), (0, 2)), (2, CAT, (2, 4), (2, 4)),
                        (3, BIRD, (4, 6), (4, 6))]),
        make_scene(14, [(1, CAT, (0, 2), (0, 2))]),
    ]
    got = sorted(scenes, key=lambda s: score_image(s, "ss"))
    # oracle: explicit comparison tuples, most classes first, id tie-break
    want = sorted(
        scenes,
        key=lambda s: (0 if len(s.instances) else 1,
                       -len({m.class_id for m in s.instances}),
                       s.image_id),
    )
    assert [s.image_id for s in got] == [s.image_id for s in want]
    assert [s.image_id for s in got] == [13, 11, 10, 12, 14]


# ---------------------------------------------------------------------------
# audio assignment


def test_ss_selects_exactly_one(corpus):
    _, pool = corpus
    entry = entry_of(two_object_scene(), "ss", 7, pool)
    assert len(entry.sounding) == 1
    assert len(entry.silent_instances) == 1
    assert entry.subset == "ss"


def test_ss_selection_uniform_over_instances(corpus):
    _, pool = corpus
    scene = two_object_scene()
    picks = 0
    trials = 10_000
    for seed in range(trials):
        entry = entry_of(scene, "ss", seed, pool)
        if entry.sounding[0].instance_id == 1:
            picks += 1
    sigma = (trials * 0.25) ** 0.5
    assert abs(picks - trials / 2) < 3 * sigma


def test_assign_audio_alpha_from_mask_center(corpus):
    _, pool = corpus
    scene = two_object_scene()
    entry = entry_of(scene, "ms", 3, pool)
    by_id = {s.instance_id: s for s in entry.sounding}
    # dog occupies columns [0,4): center 2.0 of width 8
    assert by_id[1].alpha == pytest.approx(2.0 / 8.0)
    assert by_id[2].alpha == pytest.approx(6.0 / 8.0)
    for s in entry.sounding:
        assert s.gain_left == pytest.approx(1.0 - s.alpha)
        assert s.gain_right == pytest.approx(s.alpha)


def test_assign_audio_no_clips_anywhere(corpus):
    empty_pool = AudioPool({})
    with pytest.raises(BuildError, match=r"no clips available for tags .* \(class (dog|cat)\)"):
        entry_of(two_object_scene(), "ss", 0, empty_pool)


def test_ms_caps_sounding_count(corpus):
    _, pool = corpus
    scene = make_scene(5, [
        (k, cid, (0, 2), (k - 1, k))
        for k, cid in enumerate([BIRD, CAT, DOG, CAR, MALE], 1)
    ])
    entry = assign_audio(scene, "ms", item_rng(0, 5), pool, TABLE,
                         max_sounding=3)
    assert len(entry.sounding) == 3
    ids = [s.instance_id for s in entry.sounding]
    assert ids == sorted(ids)


def test_clip_choice_uniform_over_tag_clip_pairs(corpus):
    root, _ = corpus
    # cat has 3 tags; give one tag two clips -> 4 (tag, clip) pairs
    tags = TABLE.audio_tags(CAT)
    clips = {t: [ClipRef(f"{t}.wav", 10.0)] for t in tags}
    clips[tags[0]].append(ClipRef("extra.wav", 10.0))
    pool = AudioPool(clips, TABLE)
    scene = make_scene(6, [(1, CAT, (0, 4), (0, 4))])
    counts = {}
    trials = 8000
    for seed in range(trials):
        entry = entry_of(scene, "ss", seed, pool)
        counts[entry.sounding[0].clip] = counts.get(entry.sounding[0].clip, 0) + 1
    assert len(counts) == 4
    expected = trials / 4
    sigma = (trials * 0.25 * 0.75) ** 0.5
    for clip, got in counts.items():
        assert abs(got - expected) < 4 * sigma, (clip, got)


# ---------------------------------------------------------------------------
# sound dropping


def drop_fixture(num):
    sounding = tuple(
        SoundingInstance(i, DOG, "d.wav", 0.5, 0.5, 0.5) for i in range(1, num + 1)
    )
    return ManifestEntry(1, "msmi", "", sounding, (), "audio/1.wav")


def test_drop_at_threshold_unchanged():
    entry = drop_fixture(2)
    out = drop_sounds(entry, np.random.default_rng(0))
    assert out is entry


def test_drop_probability_one_leaves_single_survivor():
    out = drop_sounds(drop_fixture(5), np.random.default_rng(1), p_drop=1.0)
    assert len(out.sounding) == 1
    assert len(out.silent_instances) == 4


def test_drop_probability_zero_keeps_all():
    entry = drop_fixture(5)
    out = drop_sounds(entry, np.random.default_rng(2), p_drop=0.0)
    assert len(out.sounding) == 5


def test_drop_keep_rates_within_three_sigma():
    trials = 10_000
    keeps = np.zeros(4)
    for seed in range(trials):
        out = drop_sounds(drop_fixture(4), np.random.default_rng([10, seed]))
        for s in out.sounding:
            keeps[s.instance_id - 1] += 1
    # keep prob = P(survivor) + P(other) * (1 - p_drop)
    p_keep = 0.25 + 0.75 * 0.5
    sigma = (trials * p_keep * (1 - p_keep)) ** 0.5
    for got in keeps:
        assert abs(got - trials * p_keep) < 3 * sigma, keeps


def test_drop_always_leaves_a_survivor():
    for seed in range(200):
        out = drop_sounds(drop_fixture(5), np.random.default_rng(seed),
                          p_drop=0.97)
        assert len(out.sounding) >= 1


# ---------------------------------------------------------------------------
# split and stats


def split_fixture(counts):
    entries = []
    image_id = 1
    for cid, num in counts.items():
        for _ in range(num):
            entries.append(ManifestEntry(
                image_id, "ss", "",
                (SoundingInstance(1, cid, "x.wav", 0.5, 0.5, 0.5),),
                (), f"audio/{image_id}.wav",
            ))
            image_id += 1
    return entries


def test_split_exact_global_count():
    out = split_entries(split_fixture({DOG: 100}), 0.1, seed=0)
    assert sum(e.split == "test" for e in out) == 10
    assert sum(e.split == "train" for e in out) == 90


def test_split_deterministic_and_seed_sensitive():
    entries = split_fixture({DOG: 50, CAT: 50})
    a = [e.split for e in split_entries(entries, 0.2, seed=5)]
    b = [e.split for e in split_entries(entries, 0.2, seed=5)]
    c = [e.split for e in split_entries(entries, 0.2, seed=6)]
    assert a == b
    assert a != c


def test_split_order_independent():
    entries = split_fixture({DOG: 30, CAT: 30, BIRD: 30})
    shuffled = list(entries)
    np.random.default_rng(0).shuffle(shuffled)
    by_id = {e.image_id: e.split
             for e in split_entries(shuffled, 0.25, seed=1)}
    want = {e.image_id: e.split
            for e in split_entries(entries, 0.25, seed=1)}
    assert by_id == want


def test_split_stratified_within_one():
    entries = split_fixture({DOG: 40, CAT: 40, BIRD: 40, CAR: 40})
    out = split_entries(entries, 0.2, seed=2)
    for cid in (DOG, CAT, BIRD, CAR):
        test_count = sum(
            1 for e in out
            if e.split == "test" and e.sounding[0].class_id == cid
        )
        assert abs(test_count - 8) <= 1
    assert sum(e.split == "test" for e in out) == 32


def test_split_fraction_validation():
    with pytest.raises(BuildError, match="fraction"):
        split_entries(split_fixture({DOG: 10}), 1.0, seed=0)


def test_dominant_class_tie_breaks_low():
    sounding = (
        SoundingInstance(1, CAT, "a.wav", 0.5, 0.5, 0.5),
        SoundingInstance(2, DOG, "b.wav", 0.5, 0.5, 0.5),
        SoundingInstance(3, CAT, "c.wav", 0.5, 0.5, 0.5),
        SoundingInstance(4, DOG, "d.wav", 0.5, 0.5, 0.5),
    )
    assert dominant_class(
        ManifestEntry(1, "msmi", "", sounding, (), "x.wav")
    ) == min(CAT, DOG)


def test_stats_single_class_ratio_one():
    stats = dataset_stats(split_fixture({DOG: 10}))
    assert stats.imbalance_ratio == 1.0
    assert stats.class_counts == {DOG: 10}


def test_stats_ratio_and_bruteforce_tally():
    entries = split_fixture({DOG: 80, CAT: 10})
    stats = dataset_stats(entries)
    assert stats.imbalance_ratio == 8.0
    want = {}
    for e in entries:
        for c in e.sounding_classes():
            want[c] = want.get(c, 0) + 1
    assert stats.class_counts == want
    assert stats.subset_counts == {"ss": 90}


# ---------------------------------------------------------------------------
# rendering


def test_render_single_source_is_panned_clip(corpus):
    root, pool = corpus
    scene = make_scene(21, [(1, DOG, (0, 8), (2, 6))])  # center col 4 -> 0.5
    entry = entry_of(scene, "ss", 11, pool)
    assert entry.sounding[0].alpha == 0.5
    rendered = render_entry(entry, {21: scene}, root)
    clip = load_wav((root / entry.sounding[0].clip).read_bytes())
    want = apply_pan(trim(clip), 0.5)
    np.testing.assert_array_equal(rendered.audio.data, want.data)
    assert rendered.audio_labels == {DOG}


def test_render_silent_instance_is_background(corpus):
    root, pool = corpus
    scene = two_object_scene(22)
    entry = entry_of(scene, "ss", 0, pool)
    rendered = render_entry(entry, {22: scene}, root)
    sounding_instance = entry.sounding[0].instance_id
    silent_instance = entry.silent_instances[0]
    masks = {
        1: rect_mask(8, 8, (0, 4), (0, 4)),
        2: rect_mask(8, 8, (4, 8), (4, 8)),
    }
    assert (rendered.label_raster[masks[silent_instance]] == 0).all()
    classes = {1: DOG, 2: CAT}
    assert (
        rendered.label_raster[masks[sounding_instance]]
        == classes[sounding_instance]
    ).all()


def test_render_left_man_right_dog_scenario(corpus):
    root, pool = corpus
    scene = make_scene(23, [
        (1, MALE, (0, 8), (0, 3)),   # left third
        (2, DOG, (0, 8), (5, 8)),    # right third
    ])
    entry = entry_of(scene, "ms", 4, pool)
    by_class = {s.class_id: s for s in entry.sounding}
    assert by_class[MALE].alpha < 0.5 < by_class[DOG].alpha
    assert by_class[DOG].gain_right > by_class[DOG].gain_left
    assert by_class[MALE].gain_left > by_class[MALE].gain_right
    rendered = render_entry(entry, {23: scene}, root)
    # independent mix of the two panned clips
    tracks = []
    for s in entry.sounding:
        clip = load_wav((root / s.clip).read_bytes())
        tracks.append(apply_pan(trim(clip), s.alpha))
    np.testing.assert_array_equal(rendered.audio.data, mix(tracks).data)


def test_render_missing_clip_names_path(corpus):
    root, pool = corpus
    scene = make_scene(24, [(1, DOG, (0, 4), (0, 4))])
    entry = entry_of(scene, "ss", 0, pool)
    broken = ManifestEntry(
        entry.image_id, entry.subset, entry.split,
        (SoundingInstance(1, DOG, "clips/nope.wav", 0.5, 0.5, 0.5),),
        entry.silent_instances, entry.mixed_audio,
    )
    with pytest.raises(BuildError, match="nope.wav"):
        render_entry(broken, {24: scene}, root)


def test_render_downmixes_stereo_clip(corpus, tmp_path):
    from avsegkit.audio import SAMPLE_RATE, write_wav

    rng = np.random.default_rng(31)
    stereo = Waveform(
        np.round(rng.uniform(-0.4, 0.4, size=(2, SAMPLE_RATE)) * 32768) / 32768
    )
    (tmp_path / "st.wav").write_bytes(write_wav(stereo))
    scene = make_scene(25, [(1, DOG, (0, 8), (0, 8))])
    entry = ManifestEntry(
        25, "ss", "",
        (SoundingInstance(1, DOG, "st.wav", 0.5, 0.5, 0.5),),
        (), "audio/25.wav",
    )
    rendered = render_entry(entry, {25: scene}, tmp_path)
    mono = Waveform(stereo.data.mean(axis=0, keepdims=True))
    want = apply_pan(trim(mono), 0.5)
    np.testing.assert_array_equal(rendered.audio.data, want.data)


# ---------------------------------------------------------------------------
# pipeline


def pipeline_corpus():
    scenes = []
    rng = np.random.default_rng(99)
    class_choices = [BIRD, CAT, DOG, CAR, MALE]
    image_id = 1
    for _ in range(12):  # no duplicates: ss + ms material
        k = int(rng.integers(1, 4))
        cids = rng.choice(class_choices, size=k, replace=False).tolist()
        scenes.append(make_scene(image_id, [
            (j + 1, cid, (2 * (j % 4), 2 * (j % 4) + 2), (2 * (j % 4), 2 * (j % 4) + 2))
            for j, cid in enumerate(cids)
        ]))
        image_id += 1
    for _ in range(8):  # with duplicates: msmi material
        cid = class_choices[int(rng.integers(len(class_choices)))]
        other = class_choices[int(rng.integers(len(class_choices)))]
        scenes.append(make_scene(image_id, [
            (1, cid, (0, 2), (0, 2)),
            (2, cid, (2, 4), (2, 4)),
            (3, other, (4, 6), (4, 6)),
        ]))
        image_id += 1
    return scenes


def test_build_manifest_modes_pass_validator(corpus):
    _, pool = corpus
    scenes = pipeline_corpus()
    by_id = {s.image_id: s for s in scenes}
    for mode in ("ss", "ms", "msmi"):
        entries = build_manifest(scenes, pool, mode, seed=3, table=TABLE)
        assert entries, mode
        assert validate_manifest(entries, mode, by_id) == []


def test_build_manifest_deterministic_and_order_independent(corpus):
    _, pool = corpus
    scenes = pipeline_corpus()
    a = build_manifest(scenes, pool, "msmi", seed=5, table=TABLE)
    b = build_manifest(scenes, pool, "msmi", seed=5, table=TABLE)
    shuffled = list(scenes)
    np.random.default_rng(1).shuffle(shuffled)
    c = build_manifest(shuffled, pool, "msmi", seed=5, table=TABLE)
    text = lambda es: "".join(e.to_json() + "\n" for e in es)
    assert text(a) == text(b) == text(c)
    assert text(a) != text(build_manifest(scenes, pool, "msmi", seed=6,
                                          table=TABLE))


def test_build_manifest_respects_priority_cap(corpus):
    _, pool = corpus
    scenes = pipeline_corpus()
    cfg = BuildConfig(max_samples=5, test_fraction=0.2)
    entries = build_manifest(scenes, pool, "ss", seed=0, table=TABLE,
                             config=cfg)
    assert len(entries) == 5
    eligible_sorted = sorted(
        (s for s in scenes if eligible(s, "ss")),
        key=lambda s: score_image(s, "ss"),
    )
    want_ids = sorted(s.image_id for s in eligible_sorted[:5])
    assert [e.image_id for e in entries] == want_ids


def test_build_manifest_empty_when_nothing_eligible(corpus):
    _, pool = corpus
    no_dupes = [s for s in pipeline_corpus() if not s.has_duplicate_class]
    assert build_manifest(no_dupes, pool, "msmi", seed=0, table=TABLE) == []


def test_manifest_file_roundtrip(corpus, tmp_path):
    _, pool = corpus
    entries = build_manifest(pipeline_corpus(), pool, "ms", seed=2,
                             table=TABLE)
    path = tmp_path / "manifest.jsonl"
    write_manifest(entries, path)
    again = read_manifest(path)
    assert [e.to_json() for e in again] == [e.to_json() for e in entries]


def test_read_manifest_reports_bad_line(tmp_path):
    path = tmp_path / "manifest.jsonl"
    path.write_text('{"image_id": 1}\n')
    with pytest.raises(BuildError, match="line 1"):
        read_manifest(path)


def test_build_config_from_kv():
    cfg = BuildConfig.from_kv({"p_drop": "0.25", "max_sounding": "4"})
    assert cfg.p_drop == 0.25 and cfg.max_sounding == 4
    with pytest.raises(BuildError, match="unknown"):
        BuildConfig.from_kv({"mystery": "1"})


# ---------------------------------------------------------------------------
# validator negatives


def test_validator_flags_violations():
    bad = [
        ManifestEntry(1, "ss", "train", (
            SoundingInstance(1, DOG, "a.wav", 0.5, 0.5, 0.5),
            SoundingInstance(2, CAT, "b.wav", 0.5, 0.5, 0.5),
        ), (), "audio/1.wav"),
        ManifestEntry(1, "ms", "", (
            SoundingInstance(1, DOG, "a.wav", 0.5, 0.5, 0.5),
            SoundingInstance(2, DOG, "b.wav", 0.3, 0.7, 0.3),
        ), (1,), "audio/1.wav"),
        ManifestEntry(3, "ss", "test", (
            SoundingInstance(1, DOG, "a.wav", 1.4, -0.4, 1.4),
        ), (), "audio/3.wav"),
        ManifestEntry(4, "ss", "test", (
            SoundingInstance(1, DOG, "a.wav", 0.25, 0.5, 0.5),
        ), (), "audio/4.wav"),
    ]
    problems = "\n".join(validate_manifest(bad))
    assert "ss entry with 2" in problems
    assert "duplicate image id" in problems
    assert "unassigned split" in problems
    assert "repeats a class" in problems
    assert "both sounding and silent" in problems
    assert "outside [0, 1]" in problems
    assert "linear pan law" in problems
