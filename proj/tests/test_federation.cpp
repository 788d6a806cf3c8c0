#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "fedmema/errors.hpp"
#include "fedmema/experiment.hpp"
#include "fedmema/federation.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace fedmema;
using fedmema::testing::random_tensor;

namespace {

ExperimentConfig tiny(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  c.image_size = 16;
  c.samples_per_site = 4;
  c.val_samples = 4;
  c.test_samples = 4;
  c.rounds = 2;
  c.batch_size = 2;
  c.lr = 1e-3;
  c.out_dir = (std::filesystem::temp_directory_path() / "fedmema_test_federation").string();
  return c;
}

DataSplits splits_for(const ExperimentConfig& c) {
  return generate_splits(c.train_samples(), c.val_samples, c.test_samples, c.image_size, c.data_seed);
}

ParamStore random_store(std::mt19937_64& rng) {
  ParamStore s;
  s.add("a.weight", random_tensor({3, 2}, rng, -1, 1, true));
  s.add("a.bias", random_tensor({3}, rng, -1, 1, true));
  s.add("b.weight", random_tensor({2, 2, 3, 3}, rng, -1, 1, true));
  return s;
}

std::vector<std::string> record_lines(const RunResult& r) {
  std::vector<std::string> out;
  for (const auto& rec : r.rounds) out.push_back(round_record_json(rec, false));
  return out;
}

std::set<MessageKind> kinds_of(const std::vector<std::vector<std::uint8_t>>& wire) {
  std::set<MessageKind> out;
  for (const auto& bytes : wire) out.insert(decode_message(bytes).kind);
  return out;
}

bool contains_bytes(const std::vector<std::uint8_t>& hay, const void* needle, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(needle);
  return std::search(hay.begin(), hay.end(), p, p + n) != hay.end();
}

std::vector<double> server_encoder_values(const Federation& fed) {
  std::vector<double> out;
  for (auto m : kAllModalities) {
    const auto v = fed.server().encoder(m).params().flatten();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

}  // namespace

TEST_CASE("aggregation of one update is the identity and of N equal updates is exact") {
  std::mt19937_64 rng(1);
  const ParamStore s = random_store(rng);
  std::vector<ParamStore> one;
  one.push_back(s.clone());
  CHECK(aggregate_encoders(one).flatten() == s.flatten());

  std::vector<ParamStore> same;
  for (int i = 0; i < 5; ++i) same.push_back(s.clone());
  CHECK(aggregate_encoders(same).flatten() == s.flatten());
}

TEST_CASE("aggregation of 0 and 2 is 1") {
  ParamStore a, b;
  a.add("w", Tensor({1}, {0.0}));
  b.add("w", Tensor({1}, {2.0}));
  std::vector<ParamStore> v;
  v.push_back(std::move(a));
  v.push_back(std::move(b));
  CHECK(aggregate_encoders(v).at("w")[0] == 1.0);
}

TEST_CASE("aggregation matches a per-scalar mean") {
  std::mt19937_64 rng(2);
  std::vector<ParamStore> ups;
  for (int i = 0; i < 3; ++i) ups.push_back(random_store(rng));
  const auto got = aggregate_encoders(ups).flatten();
  std::vector<std::vector<double>> flat;
  for (const auto& u : ups) flat.push_back(u.flatten());
  for (std::size_t j = 0; j < got.size(); ++j) {
    const double mean = (flat[0][j] + flat[1][j] + flat[2][j]) / 3.0;
    CHECK(std::abs(got[j] - mean) <= 1e-15);
  }
}

TEST_CASE("aggregation rejects mismatched or empty input") {
  std::mt19937_64 rng(3);
  std::vector<ParamStore> ups;
  ups.push_back(random_store(rng));
  ParamStore other;
  other.add("a.weight", Tensor::zeros({3, 3}));
  ups.push_back(std::move(other));
  CHECK_THROWS_AS(aggregate_encoders(ups), ProtocolError);
  CHECK_THROWS_AS(aggregate_encoders(std::span<const ParamStore>{}), ProtocolError);
}

TEST_CASE("crc32 check value and message round trip") {
  const std::string check = "123456789";
  CHECK(crc32_of({reinterpret_cast<const std::uint8_t*>(check.data()), check.size()}) == 0xCBF43926u);

  RoundMessage msg{MessageKind::AnchorDown, 17, Modality::T2, {1, 2, 3, 250}};
  const RoundMessage back = decode_message(encode_message(msg));
  CHECK(back.kind == msg.kind);
  CHECK(back.round == 17);
  CHECK(back.modality == Modality::T2);
  CHECK(back.payload == msg.payload);

  msg.modality.reset();
  CHECK_FALSE(decode_message(encode_message(msg)).modality.has_value());
}

TEST_CASE("every single-bit flip is detected") {
  std::mt19937_64 rng(4);
  RoundMessage msg{MessageKind::EncoderUp, 3, Modality::FLAIR, std::vector<std::uint8_t>(256)};
  for (auto& b : msg.payload) b = static_cast<std::uint8_t>(rng());
  const auto clean = encode_message(msg);
  int detected = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto bytes = clean;
    const std::size_t bit = rng() % (bytes.size() * 8);
    bytes[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
    try {
      decode_message(bytes);
    } catch (const ProtocolError&) {
      ++detected;
    }
  }
  CHECK(detected == 100);
  CHECK_THROWS_AS(decode_message(std::span(clean.data(), clean.size() - 1)), ProtocolError);
}

TEST_CASE("transport orders by sender then send order") {
  Transport t;
  t.send(3, 0, {MessageKind::EncoderUp, 1, std::nullopt, {3}});
  t.send(1, 0, {MessageKind::EncoderUp, 1, std::nullopt, {1}});
  t.send(3, 0, {MessageKind::DecoderUp, 1, std::nullopt, {4}});
  t.send(2, 5, {MessageKind::EncoderUp, 1, std::nullopt, {9}});
  const auto inbox = t.receive(0);
  REQUIRE(inbox.size() == 3);
  CHECK(inbox[0].from == 1);
  CHECK(inbox[1].message.payload == std::vector<std::uint8_t>{3});
  CHECK(inbox[2].message.payload == std::vector<std::uint8_t>{4});
  CHECK(t.receive(0).empty());
  CHECK(t.messages_sent() == 4);

  t.tamper = [](std::vector<std::uint8_t>& b) { b[2] ^= 0x10; };
  t.send(1, 0, {MessageKind::EncoderUp, 1, std::nullopt, {1}});
  CHECK_THROWS_AS(t.receive(0), ProtocolError);
}

TEST_CASE("clients hold exactly the broadcast state before training") {
  ExperimentConfig c = tiny("broadcast");
  c.clients_per_modality = 2;
  c.samples_per_site = 2;
  const DataSplits data = splits_for(c);
  Federation fed(c, data);
  fed.initialize();
  int checked = 0;
  std::mutex mu;
  fed.after_client_receive = [&](const Client& cl, std::uint32_t) {
    const bool enc = cl.encoder().params().flatten() == fed.server().encoder(cl.modality()).params().flatten();
    const AnchorMatrices want = fed.server().bank().matrices();
    bool anchors = cl.anchors().has_value() && cl.anchors()->labels == want.labels;
    for (std::size_t l = 0; anchors && l < kLevels; ++l) {
      anchors = std::ranges::equal(cl.anchors()->levels[l].data(), want.levels[l].data());
    }
    std::lock_guard lock(mu);
    CHECK(enc);
    CHECK(anchors);
    ++checked;
  };
  fed.run_round();
  fed.run_round();
  CHECK(checked == 16);
  CHECK(fed.round() == 2);
}

TEST_CASE("a round with zero local epochs leaves the encoders unchanged") {
  ExperimentConfig c = tiny("no_epochs");
  c.epochs_per_round = 0;
  const DataSplits data = splits_for(c);
  Federation fed(c, data);
  fed.initialize();
  const auto before = server_encoder_values(fed);
  const RoundRecord rec = fed.run_round();
  CHECK(server_encoder_values(fed) == before);
  CHECK_FALSE(rec.server_loss.has_value());
  for (const auto& cr : rec.clients) CHECK_FALSE(cr.loss.has_value());
}

TEST_CASE("a missing upload is a protocol error") {
  ExperimentConfig c = tiny("drop");
  const DataSplits data = splits_for(c);
  Federation fed(c, data);
  fed.initialize();
  fed.transport().drop = [](std::size_t from, std::size_t to, const RoundMessage& m) {
    return from == 2 && to == kServerSite && m.kind == MessageKind::EncoderUp;
  };
  CHECK_THROWS_AS(fed.run_round(), ProtocolError);
}

TEST_CASE("a corrupted download is a protocol error") {
  ExperimentConfig c = tiny("tamper");
  const DataSplits data = splits_for(c);
  Federation fed(c, data);
  fed.initialize();
  fed.transport().tamper = [](std::vector<std::uint8_t>& b) { b[b.size() / 2] ^= 1; };
  CHECK_THROWS_AS(fed.run_round(), ProtocolError);
}

TEST_CASE("run_round before initialize is a contract error") {
  const ExperimentConfig c = tiny("uninit");
  const DataSplits data = splits_for(c);
  Federation fed(c, data);
  CHECK_THROWS_AS(fed.run_round(), ContractError);
  fed.initialize();
  CHECK_THROWS_AS(fed.initialize(), ContractError);
}

TEST_CASE("with lambda_reg = 0 the server loss is the fusion loss alone") {
  ExperimentConfig c = tiny("lambda");
  c.lambda_reg = 0.0;
  const DataSplits data = splits_for(c);
  const std::vector<std::size_t> idx{0, 1, 2};
  Server server(data.train, idx, c);
  std::map<Modality, FeaturePyramid> pyrs;
  for (auto m : kAllModalities) pyrs[m] = server.encoder(m).forward(data.train.modality_batch(idx, m));
  const double fusion_only = dice_ce_loss(server.fusion().forward(pyrs).logits, data.train.mask_batch(idx)).item();
  CHECK(server.loss_on(idx).item() == doctest::Approx(fusion_only).epsilon(1e-12));

  c.lambda_reg = 0.5;
  Server with_reg(data.train, idx, c);
  double reg = 0.0;
  for (auto m : kAllModalities) {
    reg += dice_ce_loss(with_reg.regularizer().forward(pyrs.at(m)), data.train.mask_batch(idx)).item();
  }
  CHECK(with_reg.loss_on(idx).item() == doctest::Approx(fusion_only + 0.5 * reg).epsilon(1e-12));
}

TEST_CASE("with every learning rate at zero the model state is invariant") {
  ExperimentConfig c = tiny("frozen");
  c.lr = 0.0;
  c.rounds = 3;
  const DataSplits data = splits_for(c);
  Federation fed(c, data);
  fed.initialize();
  const auto server_before = server_encoder_values(fed);
  std::vector<std::vector<double>> dec_before;
  for (const auto& cl : fed.clients()) dec_before.push_back(cl->decoder().params().flatten());
  for (int r = 0; r < 3; ++r) fed.run_round();
  CHECK(server_encoder_values(fed) == server_before);
  for (std::size_t i = 0; i < fed.clients().size(); ++i) {
    CHECK(fed.clients()[i]->decoder().params().flatten() == dec_before[i]);
    CHECK(fed.clients()[i]->encoder().params().flatten() ==
          fed.server().encoder(fed.clients()[i]->modality()).params().flatten());
  }
}

TEST_CASE("client loss does not increase over one local epoch") {
  for (std::uint64_t seed : {0, 1, 2}) {
    ExperimentConfig c = tiny("loss");
    c.seed = seed;
    c.data_seed = seed;
    const DataSplits data = splits_for(c);
    const SitePartition part = partition(c.train_samples(), c.setting, c.clients_per_modality, c.data_seed);
    Client client(part.clients[0], data.train, c);
    const std::vector<std::size_t> all{0, 1, 2, 3};
    const double before = client.loss_on(all).item();
    client.train(1, 1);
    CHECK(client.loss_on(all).item() <= before);
  }
}

TEST_CASE("messages carry no decoder weights, images or masks") {
  ExperimentConfig c = tiny("privacy");
  RunOptions opt;
  opt.write_artifacts = false;
  opt.keep_messages = true;
  const RunResult r = run_federation(c, opt);
  REQUIRE_FALSE(r.messages.empty());
  const std::set<MessageKind> kinds = kinds_of(r.messages);
  CHECK(kinds == std::set<MessageKind>{MessageKind::EncoderDown, MessageKind::EncoderUp, MessageKind::AnchorDown});

  std::vector<std::uint8_t> corpus;
  for (const auto& m : r.messages) corpus.insert(corpus.end(), m.begin(), m.end());
  for (const char* name : {"up1.", "up2.", "up3.", "head."}) CHECK_FALSE(contains_bytes(corpus, name, std::strlen(name)));

  const DataSplits data = splits_for(c);
  const std::size_t hw = c.image_size * c.image_size;
  for (const auto& s : data.train.samples) {
    CHECK_FALSE(contains_bytes(corpus, s.mask.data(), s.mask.size()));
    // one image row, as stored and widened
    CHECK_FALSE(contains_bytes(corpus, s.image.data() + hw / 2, c.image_size * sizeof(float)));
    std::vector<double> wide(s.image.begin() + hw / 2, s.image.begin() + hw / 2 + c.image_size);
    CHECK_FALSE(contains_bytes(corpus, wide.data(), wide.size() * sizeof(double)));
  }
}

TEST_CASE("message kinds follow the ablation mode") {
  RunOptions opt;
  opt.write_artifacts = false;
  opt.keep_messages = true;
  ExperimentConfig c = tiny("kinds");
  c.rounds = 1;

  c.mode = AblationMode::FedAvgAll;
  CHECK(kinds_of(run_federation(c, opt).messages) ==
        std::set<MessageKind>{MessageKind::EncoderDown, MessageKind::EncoderUp, MessageKind::DecoderDown,
                              MessageKind::DecoderUp});
  c.mode = AblationMode::FedDecoderOnly;
  CHECK(kinds_of(run_federation(c, opt).messages) ==
        std::set<MessageKind>{MessageKind::DecoderDown, MessageKind::DecoderUp});
  c.mode = AblationMode::FedEncoderOnly;
  CHECK(kinds_of(run_federation(c, opt).messages) ==
        std::set<MessageKind>{MessageKind::EncoderDown, MessageKind::EncoderUp});
  c.mode = AblationMode::NoLacca;
  CHECK(kinds_of(run_federation(c, opt).messages) ==
        std::set<MessageKind>{MessageKind::EncoderDown, MessageKind::EncoderUp});
  c.mode = AblationMode::LocalOnly;
  CHECK(run_federation(c, opt).messages.empty());
}

TEST_CASE("runs are deterministic across repeats and thread counts") {
  ExperimentConfig c = tiny("determinism");
  RunOptions opt;
  opt.write_artifacts = false;
  const RunResult a = run_federation(c, opt);
  const RunResult b = run_federation(c, opt);
  c.parallelism = 4;
  const RunResult d = run_federation(c, opt);
  CHECK(record_lines(a) == record_lines(b));
  CHECK(record_lines(a) == record_lines(d));
  CHECK(a.final_metrics.client_avg_mdsc == d.final_metrics.client_avg_mdsc);
  CHECK(a.final_metrics.server_mdsc == d.final_metrics.server_mdsc);
}

TEST_CASE("zero rounds writes the initial state only") {
  ExperimentConfig c = tiny("zero_rounds");
  c.rounds = 0;
  const RunResult r = run_federation(c);
  std::ifstream log(r.run_dir / "rounds.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 1);
  CHECK(std::filesystem::exists(r.run_dir / "checkpoints" / "init" / "client0_encoder.ckpt"));
  CHECK_FALSE(std::filesystem::exists(r.run_dir / "checkpoints" / "final"));
  CHECK(std::filesystem::exists(r.run_dir / "metrics.json"));
  CHECK_THROWS_AS(export_attention_from_run(r.run_dir), DataError);
}

TEST_CASE("a run reproduces from its config snapshot") {
  const ExperimentConfig c = tiny("snapshot");
  const RunResult first = run_federation(c);
  ExperimentConfig again = load_config(first.run_dir / "config.snapshot");
  again.name = "snapshot_again";
  RunOptions opt;
  opt.write_artifacts = false;
  CHECK(record_lines(run_federation(again, opt)) == record_lines(first));
}

TEST_CASE("attention export holds row-stochastic weights") {
  ExperimentConfig c = tiny("attn");
  c.rounds = 1;
  c.export_attn = true;
  const RunResult r = run_federation(c);
  std::filesystem::remove_all(r.run_dir / "attn");
  CHECK(export_attention_from_run(r.run_dir) == 16);
  for (std::size_t id = 0; id < 4; ++id) {
    for (std::size_t l = 1; l <= kLevels; ++l) {
      const auto path = r.run_dir / "attn" /
                        ("client" + std::to_string(id) + "_round1_level" + std::to_string(l) + ".json");
      REQUIRE(std::filesystem::exists(path));
      std::ifstream f(path);
      const auto j = nlohmann::json::parse(f);
      CHECK(j["anchors"].get<std::size_t>() == j["anchor_labels"].size());
      CHECK(j["weights"].size() == j["tokens"].get<std::size_t>());
      for (const auto& row : j["weights"]) {
        double s = 0.0;
        for (double w : row) {
          CHECK(w >= 0.0);
          s += w;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
  c.mode = AblationMode::NoLacca;
  c.name = "attn_none";
  c.export_attn = false;
  CHECK_THROWS_AS(export_attention_from_run(run_federation(c).run_dir), ConfigError);
}

TEST_CASE("experiment drivers") {
  ExperimentConfig c = tiny("drivers");
  c.rounds = 1;
  c.seeds = {0, 1};
  CHECK_THROWS_AS(run_sweep(c, "optim.lr", {"0.1"}), ConfigError);
  CHECK_THROWS_AS(run_sweep(c, "anchors.n_k", {"3", "3"}), ConfigError);
  CHECK_THROWS_AS(run_sweep(c, "anchors.n_k", {"0"}), ConfigError);

  ExperimentOptions opt;
  opt.jobs = 2;
  const ExperimentReport rep = run_ablation(c, opt);
  REQUIRE(rep.rows.size() == 6);
  CHECK(rep.jobs.size() == 12);
  for (const auto& row : rep.rows) CHECK(row.client_per_seed.size() == 2);
  CHECK(std::filesystem::exists(rep.summary_dir / "summary.json"));
  CHECK(format_report(rep).find("| e | full |") != std::string::npos);

  const ExperimentReport sw = run_sweep(c, "anchors.level", {"1", "1-4"}, opt);
  REQUIRE(sw.rows.size() == 2);
  CHECK(std::filesystem::exists(run_directory(c) / "sweep_level" / "level_concat" / "metrics.json"));

  const auto [m, s] = mean_std({1.0, 2.0, 3.0});
  CHECK(m == 2.0);
  CHECK(s == 1.0);
  CHECK(mean_std({5.0}).second == 0.0);
}
