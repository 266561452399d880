#include <filesystem>

#include <gtest/gtest.h>

#include "gradmap/checkpoint.hpp"
#include "oracles.hpp"

using namespace gradmap;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("gradmap_ckpt_" + name);
}

TransformerModel sample_model() {
    TransformerModel m = TransformerModel::initialize(oracle::tiny_config(3), 21, 0.2).remove_layer(1);
    m.set_provenance(R"({"note":"test"})");
    return m;
}

} // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    const TransformerModel m = sample_model();
    const auto a = temp_path("a.gmap"), b = temp_path("b.gmap");
    save_checkpoint(m, a);
    save_checkpoint(load_checkpoint(a), b);
    EXPECT_EQ(read_file_bytes(a), read_file_bytes(b));
    std::filesystem::remove(a);
    std::filesystem::remove(b);
}

TEST(Checkpoint, LoadedModelForwardsBitwise) {
    const TransformerModel m = sample_model();
    const TransformerModel loaded = deserialize_checkpoint(serialize_checkpoint(m));
    EXPECT_TRUE(loaded == m);
    EXPECT_EQ(loaded.removed(), std::set<int>{1});
    EXPECT_EQ(loaded.provenance(), m.provenance());
    const auto tokens = oracle::random_tokens(12, 3);
    EXPECT_EQ(forward(loaded, tokens).logits, forward(m, tokens).logits);
}

TEST(Checkpoint, Float32StorageRoundsOnce) {
    ModelConfig c = oracle::tiny_config(1);
    c.precision = Precision::f32;
    const TransformerModel m = TransformerModel::initialize(c, 4, 0.2);
    const TransformerModel once = deserialize_checkpoint(serialize_checkpoint(m));
    const TransformerModel twice = deserialize_checkpoint(serialize_checkpoint(once));
    EXPECT_TRUE(once == twice);
    EXPECT_LT(max_abs_diff(once.layer(0).w_up, m.layer(0).w_up), 1e-7);
    const auto f64 = TransformerModel::initialize(oracle::tiny_config(1), 4, 0.2);
    EXPECT_LT(serialize_checkpoint(m).size(), serialize_checkpoint(f64).size());
}

TEST(Checkpoint, CorruptedMagicNamesExpectedMagic) {
    auto bytes = serialize_checkpoint(sample_model());
    bytes[0] = 'X';
    try {
        deserialize_checkpoint(bytes);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("GMAP"), std::string::npos);
        EXPECT_EQ(e.offset(), 0u);
    }
}

TEST(Checkpoint, TruncationAndTrailingBytesAreFormatErrors) {
    const auto bytes = serialize_checkpoint(sample_model());
    for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
        std::vector<char> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        EXPECT_THROW(deserialize_checkpoint(t), FormatError) << cut;
    }
    auto extra = bytes;
    extra.push_back(0);
    EXPECT_THROW(deserialize_checkpoint(extra), FormatError);
}

TEST(Checkpoint, WrongVersionRejected) {
    auto bytes = serialize_checkpoint(sample_model());
    bytes[4] = 99;
    EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, MissingFileIsInputError) {
    EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.gmap")), InputError);
}
