#include <gtest/gtest.h>

#include <cmath>

#include "pgap/checkpoint.hpp"
#include "pgap/synthgen.hpp"
#include "pgap/training.hpp"
#include "test_support.hpp"

using namespace pgap;
using pgap::test::TempDir;

namespace {

PointCloud random_cloud(std::size_t n, Rng& rng) {
    PointCloud c;
    for (std::size_t i = 0; i < n; ++i) c.points.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0, 3)});
    return c;
}

const Sequence& small_orchard(std::uint64_t seed) {
    static std::map<std::uint64_t, Sequence> cache;
    auto it = cache.find(seed);
    if (it == cache.end()) {
        OrchardSpec spec;
        spec.seed = seed;
        it = cache.emplace(seed, generate(spec)).first;
    }
    return it->second;
}

TrainConfig tiny_config(int epochs) {
    TrainConfig c;
    c.data.num_points = 32;
    c.optim.max_epochs = epochs;
    c.optim.patience = epochs;
    c.mining.anchor_min_spacing = 2.0;
    return c;
}

bool same_parameters(const PointNetPGAP& a, const PointNetPGAP& b) {
    const auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i]->value() != pb[i]->value()) return false;
    }
    return true;
}

} // namespace

TEST(TupleLoss, GradientMatchesFiniteDifferences) {
    // a 2-negative tuple through the full network, SLC on, hinge held active by a wide margin
    LossConfig loss;
    loss.margin = 4.0;
    std::size_t sampled = 0, kinks = 0;
    for (std::uint64_t instance = 0; instance < 20; ++instance) {
        auto model = PointNetPGAP::init({}, 100 + instance);
        Rng rng(200 + instance);
        std::vector<PointCloud> members;
        for (int i = 0; i < 4; ++i) members.push_back(random_cloud(12, rng));
        const std::vector<int> labels{1, 1, 2, 5};
        model.zero_grad();
        const auto forward = tuple_loss(model, members, labels, loss, true);
        ASSERT_GT(forward.triplet, 0.0);
        const PointNetPGAP& frozen = model;
        const auto f = [&] {
            return tuple_loss(const_cast<PointNetPGAP&>(frozen), members, labels, loss, false).total;
        };
        std::uint64_t seed = instance * 100;
        for (auto* p : model.parameters()) {
            const Tensor analytic = p->grad();
            EXPECT_LT(pgap::test::sampled_gradient_error(*p, analytic, f, 8, ++seed, &kinks), 1e-4)
                << p->name() << " instance " << instance;
            sampled += std::min<std::size_t>(8, p->value().size());
        }
    }
    EXPECT_LT(kinks * 20, sampled) << kinks << " of " << sampled << " coordinates sit on a kink";
}

TEST(TupleLoss, SlcDisabledEqualsTripletOnly) {
    auto model = PointNetPGAP::init({}, 3);
    Rng rng(4);
    std::vector<PointCloud> members;
    for (int i = 0; i < 5; ++i) members.push_back(random_cloud(16, rng));
    const std::vector<int> labels{1, 1, 2, 3, 4};
    LossConfig off;
    off.slc_enabled = false;
    const auto r = tuple_loss(model, members, labels, off, false);
    EXPECT_EQ(r.total, r.triplet);
    EXPECT_EQ(r.slc, 0.0);
    EXPECT_THROW(tuple_loss(model, {members[0], members[1]}, std::vector<int>{1, 1}, off, false), ContractError);
}

TEST(Train, AlphaOneMatchesSlcDisabled) {
    const std::vector<Sequence> seqs{small_orchard(1)};
    auto a = tiny_config(2);
    a.loss.alpha = 1.0;
    auto b = tiny_config(2);
    b.loss.slc_enabled = false;
    const auto ra = train(seqs, small_orchard(1001), a);
    const auto rb = train(seqs, small_orchard(1001), b);
    ASSERT_EQ(ra.history.size(), rb.history.size());
    for (std::size_t e = 0; e < ra.history.size(); ++e) {
        EXPECT_EQ(ra.history[e].triplet, rb.history[e].triplet);
        EXPECT_EQ(ra.history[e].val_recall_at_1, rb.history[e].val_recall_at_1);
    }
    EXPECT_TRUE(same_parameters(ra.final_model, rb.final_model));
}

TEST(Train, ShortRunLearnsAndIsReproducible) {
    const std::vector<Sequence> seqs{small_orchard(1)};
    const auto cfg = tiny_config(5);
    const auto r = train(seqs, small_orchard(1001), cfg);
    ASSERT_EQ(r.history.size(), 5u);
    EXPECT_GT(r.tuples_per_epoch, 0u);
    std::size_t decreases = 0;
    for (std::size_t e = 1; e < r.history.size(); ++e) decreases += r.history[e].loss < r.history[e - 1].loss;
    EXPECT_GE(decreases, 3u);
    double best = -1.0;
    for (const auto& h : r.history) {
        EXPECT_TRUE(std::isfinite(h.loss));
        EXPECT_NEAR(h.loss, 0.5 * h.triplet + 0.5 * h.slc, 1e-9 * std::max(1.0, h.loss));
        best = std::max(best, h.val_recall_at_1);
    }
    EXPECT_EQ(r.best_recall, best);
    EXPECT_GE(r.best_recall, r.history.back().val_recall_at_1);
    EXPECT_EQ(r.history[static_cast<std::size_t>(r.best_epoch - 1)].val_recall_at_1, r.best_recall);

    ::setenv("PGAP_THREADS", "0", 1);
    const auto again = train(seqs, small_orchard(1001), tiny_config(5));
    ::unsetenv("PGAP_THREADS");
    ASSERT_EQ(again.history.size(), r.history.size());
    for (std::size_t e = 0; e < r.history.size(); ++e) EXPECT_EQ(again.history[e].loss, r.history[e].loss);
    EXPECT_TRUE(same_parameters(again.best_model, r.best_model));
}

TEST(Train, PatienceStopsEarly) {
    auto cfg = tiny_config(50);
    cfg.optim.patience = 1;
    cfg.optim.learning_rate = 1e-9;
    const auto r = train({small_orchard(1)}, small_orchard(1001), cfg);
    EXPECT_LT(r.history.size(), 50u);
}

TEST(Train, NoTuplesIsATrainingError) {
    auto cfg = tiny_config(1);
    cfg.mining.r_th = 1e-6;
    EXPECT_THROW(train({small_orchard(1)}, small_orchard(1001), cfg), TrainingError);
    EXPECT_THROW(train({}, small_orchard(1001), cfg), TrainingError);
}

TEST(Checkpoint, RoundTripAndCorruption) {
    Checkpoint ckpt;
    ckpt.model = PointNetPGAP::init({}, 9);
    ckpt.seed = 9;
    ckpt.epoch = 4;
    ckpt.history = nlohmann::json::array({{{"epoch", 1}, {"L", 0.5}}});
    ckpt.metadata = {{"num_points", 128}};
    TempDir dir("ckpt");
    save_checkpoint(dir / "m.ckpt", ckpt);
    const auto back = load_checkpoint(dir / "m.ckpt");
    EXPECT_TRUE(same_parameters(back.model, ckpt.model));
    EXPECT_EQ(back.seed, 9u);
    EXPECT_EQ(back.epoch, 4);
    EXPECT_EQ(back.history, ckpt.history);
    EXPECT_EQ(back.metadata, ckpt.metadata);

    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), LoadError);
    const std::string bytes = detail::read_file(dir / "m.ckpt");
    std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 8);
    EXPECT_THROW(load_checkpoint(dir / "short.ckpt"), ParseError);
    std::ofstream(dir / "junk.ckpt", std::ios::binary) << "not a checkpoint at all";
    EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), ParseError);
}
