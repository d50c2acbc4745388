#include <gtest/gtest.h>

#include "qvote/bits.hpp"
#include "qvote/digest.hpp"
#include "qvote/encoding.hpp"
#include "qvote/error.hpp"
#include "qvote/random.hpp"

using namespace qvote;

TEST(BitString, ParsesAndPrints) {
  auto b = BitString::from_string("10110");
  EXPECT_EQ(b.size(), 5u);
  EXPECT_EQ(b.to_string(), "10110");
  EXPECT_EQ(b.count_ones(), 3u);
  EXPECT_THROW(BitString::from_string("10a"), Error);
}

TEST(BitString, PacksMsbFirstWithZeroPadding) {
  EXPECT_EQ(BitString::from_string("1011").pack(), Bytes{0xB0});
  EXPECT_EQ(BitString::from_string("111111111").pack(), (Bytes{0xFF, 0x80}));
  EXPECT_TRUE(BitString().pack().empty());
}

TEST(BitString, UnpackInvertsPack) {
  Rng rng(1);
  for (int n = 0; n < 70; ++n) {
    BitString b;
    for (int i = 0; i < n; ++i) b.push_back(rng.bit());
    EXPECT_EQ(BitString::unpack(b.pack(), b.size()), b);
  }
  EXPECT_EQ(BitString::unpack(Bytes{0x41}).to_string(), "01000001");
}

TEST(BitString, SliceAndBounds) {
  auto b = BitString::from_string("110010");
  EXPECT_EQ(b.slice(2, 3).to_string(), "001");
  EXPECT_THROW(b.slice(4, 3), Error);
  EXPECT_THROW(b.at(6), Error);
  b.flip(0);
  EXPECT_EQ(b.to_string(), "010010");
}

TEST(Digest, MatchesFipsVectors) {
  EXPECT_EQ(to_hex(sha256(std::string_view(""))),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(to_hex(sha256(std::string_view("abc"))),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(to_hex(sha256(std::string(1'000'000, 'a'))),
            "cdc76e5c9914fb9281a1c7e284d73e67f1809a48a497200e046d39ccc7112cd0");
}

TEST(Digest, HexParsingIsCaseInsensitiveAndStrict) {
  const auto d = sha256(std::string_view("abc"));
  std::string upper = to_hex(d);
  for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  EXPECT_EQ(digest_from_hex(upper), d);
  EXPECT_THROW(digest_from_hex("abc"), Error);
  EXPECT_THROW(digest_from_hex(std::string(64, 'g')), Error);
  try {
    digest_from_hex("00");
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_receipt);
  }
}

TEST(Digest, ConstantTimeEquality) {
  auto a = sha256(std::string_view("x"));
  auto b = a;
  EXPECT_TRUE(digest_equal(a, b));
  b[31] ^= 1;
  EXPECT_FALSE(digest_equal(a, b));
}

TEST(Base64, RoundTripsAndRejectsGarbage) {
  EXPECT_EQ(base64_encode(std::string_view("")), "");
  EXPECT_EQ(base64_encode(std::string_view("f")), "Zg==");
  EXPECT_EQ(base64_encode(std::string_view("foobar")), "Zm9vYmFy");
  Rng rng(2);
  for (int n = 0; n < 64; ++n) {
    Bytes b(n);
    for (auto& x : b) x = static_cast<std::uint8_t>(rng());
    EXPECT_EQ(base64_decode(base64_encode(b)), b);
  }
  EXPECT_THROW(base64_decode("Zg="), Error);
  EXPECT_THROW(base64_decode("Z!=="), Error);
  EXPECT_THROW(base64_decode("Zm9v\nYmFy"), Error);
}

TEST(Rng, SeededStreamsAreReproducible) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a(), b());
  EXPECT_NE(Rng::derive(1, 0), Rng::derive(1, 1));
  EXPECT_EQ(Rng::hash("abc"), Rng::hash("abc"));
  Rng c(7);
  for (int i = 0; i < 1000; ++i) {
    double u = c.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(Rng, CountOnesMatchesBitwiseCount) {
  Rng rng(9);
  std::uint64_t total = 0;
  const std::uint64_t n = 1'000'003;
  total = rng.count_ones(n);
  EXPECT_NEAR(double(total) / double(n), 0.5, 0.002);
  EXPECT_EQ(Rng(1).count_ones(0), 0u);
  EXPECT_LE(Rng(1).count_ones(3), 3u);
}
