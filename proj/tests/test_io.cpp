#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "stan/io.hpp"
#include "stan/random.hpp"
#include "test_util.hpp"

using namespace stan;
namespace fs = std::filesystem;

namespace {

fs::path golden(const char* name) { return fs::path(STAN_GOLDEN_DIR) / name; }

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("stan_test_io_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    return dir / name;
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace

TEST(TensorFile, RoundtripBitwise) {
    Rng rng(1);
    auto t = stan::testing::random_tensor<float>({2, 3}, rng, -5, 5);
    t.mutable_data()[1] = -0.0f;
    const auto path = scratch("t.stt");
    write_tensor(path, t);
    EXPECT_TRUE(same_bits(read_tensor(path), t));
    EXPECT_EQ(fs::file_size(path), 4u + 2 + 1 + 1 + 2 * 4 + 6 * 4);
}

TEST(TensorFile, HeaderLayout) {
    Tensor<float> t({1, 2}, std::vector<float>{1.0f, -2.0f});
    const auto b = encode_tensor(t);
    ASSERT_EQ(b.size(), 4u + 4 + 8 + 8);
    EXPECT_EQ(b.substr(0, 4), "STAN");
    EXPECT_EQ(b[4], 1);  // version, little endian
    EXPECT_EQ(b[5], 0);
    EXPECT_EQ(b[6], 0);  // dtype f32
    EXPECT_EQ(b[7], 2);  // rank
    EXPECT_EQ(static_cast<unsigned char>(b[8]), 1);
    EXPECT_EQ(static_cast<unsigned char>(b[12]), 2);
    std::uint32_t bits = 0;
    for (int i = 3; i >= 0; --i) bits = bits << 8 | static_cast<unsigned char>(b[20 + i]);
    EXPECT_EQ(std::bit_cast<float>(bits), -2.0f);
}

TEST(TensorFile, RejectsCorruption) {
    Tensor<float> t({2, 3}, std::vector<float>(6, 1.0f));
    const auto b = encode_tensor(t);
    EXPECT_THROW(decode_tensor(std::string_view(b).substr(0, b.size() - 1)), DataError);
    EXPECT_THROW(decode_tensor(b + "x"), DataError);
    auto bad = b;
    bad[0] = 'X';
    EXPECT_THROW(decode_tensor(bad), DataError);
    bad = b;
    bad[4] = 2;
    EXPECT_THROW(decode_tensor(bad), DataError);
    bad = b;
    bad[6] = 1;
    EXPECT_THROW(decode_tensor(bad), DataError);
    bad = b;
    bad[7] = 0;
    EXPECT_THROW(decode_tensor(bad.substr(0, 8)), DataError);
    EXPECT_THROW(decode_tensor(std::string_view()), DataError);
}

TEST(TensorFile, RankZeroRejectedOnWrite) {
    Tensor<float> scalar({}, std::vector<float>{1.0f});
    EXPECT_THROW(encode_tensor(scalar), ShapeError);
}

TEST(TensorFile, TruncatedFileLeavesNothing) {
    Tensor<float> t({4}, std::vector<float>{1, 2, 3, 4});
    const auto path = scratch("trunc.stt");
    write_tensor(path, t);
    fs::resize_file(path, fs::file_size(path) - 1);
    EXPECT_THROW(read_tensor(path), DataError);
    EXPECT_THROW(read_tensor(scratch("missing.stt")), IoError);
}

TEST(TensorFile, GoldenBytes) {
    const auto bytes = read_file(golden("tensor_2x3.stt"));
    const auto t = decode_tensor(bytes);
    ASSERT_EQ(t.shape(), (Shape{2, 3}));
    const std::vector<float> want{0.0f, -1.5f, 3.25f, 0.1f, -0.0f, 65504.0f};
    EXPECT_TRUE(same_bits(t, Tensor<float>({2, 3}, want)));
    EXPECT_TRUE(std::signbit(t.data()[4]));
    EXPECT_EQ(encode_tensor(t), bytes);
}

TEST(Checkpoint, RoundtripAndTrailer) {
    Checkpoint ck;
    ck.tensors.emplace_back("x", Tensor<float>({3}, std::vector<float>{1, 2, 3}));
    ck.tensors.emplace_back("y.z", Tensor<float>({1, 1}, std::vector<float>{-7}));
    ck.trailer = {{"seed", 3}, {"config_hash", "abc"}};
    const auto path = scratch("c.sck");
    save_checkpoint(path, ck);
    const auto back = load_checkpoint(path);
    ASSERT_EQ(back.tensors.size(), 2u);
    EXPECT_EQ(back.tensors[1].first, "y.z");
    EXPECT_TRUE(same_bits(back.tensors[0].second, ck.tensors[0].second));
    EXPECT_EQ(back.trailer, ck.trailer);
    EXPECT_EQ(encode_checkpoint(back), read_file(path));
}

TEST(Checkpoint, GoldenBytes) {
    const auto bytes = read_file(golden("checkpoint.sck"));
    const auto ck = decode_checkpoint(bytes);
    ASSERT_EQ(ck.tensors.size(), 2u);
    EXPECT_EQ(ck.tensors[0].first, "a");
    EXPECT_EQ(ck.tensors[1].first, "head.w");
    EXPECT_EQ(ck.tensors[1].second.shape(), (Shape{1, 2}));
    EXPECT_EQ(ck.tensors[1].second.data()[1], -0.25f);
    EXPECT_EQ(ck.trailer.at("seed"), 7);
    EXPECT_EQ(encode_checkpoint(ck), bytes);
}

TEST(Checkpoint, RejectsDuplicatesAndBadTrailer) {
    Checkpoint ck;
    ck.tensors.emplace_back("x", Tensor<float>({1}, std::vector<float>{1}));
    ck.tensors.emplace_back("x", Tensor<float>({1}, std::vector<float>{2}));
    EXPECT_THROW(encode_checkpoint(ck), DataError);
    ck.tensors.pop_back();
    auto bytes = encode_checkpoint(ck);
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, 6)), DataError);
}

TEST(Checkpoint, LoadParametersChecksNamesAndShapes) {
    Rng rng(2);
    ParameterSet<float> ps;
    ps.uniform("w", {2, 2}, 2, rng);
    ps.uniform("b", {2}, 2, rng);
    auto ck = checkpoint_from(ps, {});
    ParameterSet<float> other;
    other.uniform("w", {2, 2}, 2, rng);
    other.uniform("b", {2}, 2, rng);
    load_parameters(other, ck);
    EXPECT_TRUE(same_bits(*other.find("w"), *ps.find("w")));

    ParameterSet<float> wrong_shape;
    wrong_shape.uniform("w", {2, 3}, 2, rng);
    wrong_shape.uniform("b", {2}, 2, rng);
    EXPECT_THROW(load_parameters(wrong_shape, ck), ConfigError);
    ParameterSet<float> wrong_name;
    wrong_name.uniform("w", {2, 2}, 2, rng);
    wrong_name.uniform("c", {2}, 2, rng);
    EXPECT_THROW(load_parameters(wrong_name, ck), ConfigError);
    ParameterSet<float> fewer;
    fewer.uniform("w", {2, 2}, 2, rng);
    EXPECT_THROW(load_parameters(fewer, ck), ConfigError);
}

TEST(Manifest, JsonRoundtrip) {
    DatasetManifest m;
    m.name = "toy";
    m.image_shape = {3, 8, 8};
    m.num_known_classes = 2;
    m.entries = {{"a.stt", 0, Split::train, true}, {"b.stt", 1, Split::val, true}, {"c.stt", UNKNOWN, Split::test, false}};
    const auto back = manifest_from_json(manifest_to_json(m), "/base");
    EXPECT_EQ(manifest_to_json(back), manifest_to_json(m));
    EXPECT_EQ(back.resolve(back.entries[0]), fs::path("/base/a.stt"));
}

TEST(Manifest, ProtocolGuard) {
    auto j = nlohmann::json::parse(R"({"name": "x", "image_shape": [3, 4, 4], "entries": [
        {"path": "a", "label": 0, "split": "train", "openness": "known"},
        {"path": "b", "label": 1, "split": "test", "openness": "known"},
        {"path": "c", "label": -1, "split": "train", "openness": "unknown"}]})");
    EXPECT_THROW(manifest_from_json(j, "."), DataError);
    j["entries"][2]["split"] = "val";
    EXPECT_THROW(manifest_from_json(j, "."), DataError);
    j["entries"][2]["split"] = "test";
    const auto m = manifest_from_json(j, ".");
    EXPECT_EQ(m.num_known_classes, 2u);  // inferred from labels
    j["entries"][2]["label"] = 3;
    EXPECT_THROW(manifest_from_json(j, "."), DataError);
    j["entries"][2]["label"] = -1;
    j["extra"] = 1;
    EXPECT_THROW(manifest_from_json(j, "."), DataError);
}

TEST(Manifest, LoadSamplesChecksShape) {
    const auto dir = scratch("ds");
    write_tensor(dir / "a.stt", Tensor<float>({3, 2, 2}, std::vector<float>(12, 0.5f)));
    write_tensor(dir / "b.stt", Tensor<float>({3, 2, 3}, std::vector<float>(18, 0.5f)));
    DatasetManifest m;
    m.image_shape = {3, 2, 2};
    m.num_known_classes = 2;
    m.base_dir = dir;
    m.entries = {{"a.stt", 0, Split::train, true}, {"b.stt", 1, Split::test, true}};
    EXPECT_EQ(load_samples<float>(m, Split::train, true, false).size(), 1u);
    EXPECT_THROW(load_samples<float>(m, Split::test, true, false), DataError);
}

TEST(ScoreCsv, EmptyIsHeaderOnly) {
    EXPECT_EQ(format_scores({}), "path,true_label,pred_label,score\n");
    EXPECT_TRUE(parse_scores(format_scores({})).empty());
}

TEST(ScoreCsv, RoundtripFiveRows) {
    std::vector<ScoredSample> rows{{"a.stt", 0, 0, 1.25},
                                   {"with,comma", 1, 2, -3.5},
                                   {"q\"uote", UNKNOWN, 1, 0.1f},
                                   {"x", 3, 3, 1e-20},
                                   {"y", UNKNOWN, 0, 123456.789f}};
    const auto path = scratch("s.csv");
    write_scores(path, rows);
    const auto back = read_scores(path);
    ASSERT_EQ(back.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(back[i].path, rows[i].path);
        EXPECT_EQ(back[i].true_label, rows[i].true_label);
        EXPECT_EQ(back[i].pred_label, rows[i].pred_label);
        EXPECT_EQ(static_cast<float>(back[i].score), static_cast<float>(rows[i].score));
    }
    EXPECT_EQ(format_scores(back), read_file(path));
}

TEST(ScoreCsv, NegativeZero) {
    EXPECT_EQ(format_score(-0.0), "0");
    const auto back = parse_scores(format_scores({{"p", 0, 0, -0.0}}));
    EXPECT_EQ(back[0].score, 0.0);
    EXPECT_FALSE(std::signbit(back[0].score));
}

TEST(ScoreCsv, GoldenBytes) {
    const auto text = read_file(golden("scores.csv"));
    const auto rows = parse_scores(text);
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[1].path, "dir,with comma/x.stt");
    EXPECT_EQ(rows[2].path, "quote\"d.stt");
    EXPECT_EQ(rows[2].true_label, UNKNOWN);
    EXPECT_EQ(rows[3].score, 3.14159274);
    EXPECT_EQ(format_scores(rows), text);
}

TEST(ScoreCsv, RejectsMalformed) {
    EXPECT_THROW(parse_scores("nope\n"), DataError);
    EXPECT_THROW(parse_scores("path,true_label,pred_label,score\na,1,2\n"), DataError);
    EXPECT_THROW(parse_scores("path,true_label,pred_label,score\na,1,2,x\n"), DataError);
    EXPECT_THROW(parse_scores("path,true_label,pred_label,score\n\"a,1,2,3\n"), DataError);
}

TEST(AtomicWrite, CreatesDirectoriesAndReplaces) {
    const auto path = scratch("nested/deeper/f.txt");
    atomic_write(path, "one");
    atomic_write(path, "two");
    EXPECT_EQ(read_file(path), "two");
    for (const auto& e : fs::directory_iterator(path.parent_path())) EXPECT_EQ(e.path().filename(), "f.txt");
}
