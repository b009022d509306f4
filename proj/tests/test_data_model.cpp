#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "flash/data_model.hpp"

using namespace flash;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name, const std::string& content)
        : path("/tmp/flash_test_" + name) {
        std::ofstream out(path);
        out << content;
    }
    ~TempFile() { std::remove(path.c_str()); }
};

SubjectRecord make_subject(double T, bool event, std::vector<std::vector<double>> times,
                           std::vector<std::vector<double>> values, Vec x = Vec::Zero(2)) {
    SubjectRecord s;
    s.id = "s";
    s.x = x;
    s.event_time = T;
    s.event = event;
    for (std::size_t l = 0; l < times.size(); ++l)
        s.markers.push_back(MarkerSeries{times[l], values[l]});
    return s;
}

}  // namespace

TEST_CASE("marker series validation") {
    MarkerSeries ok{{0.0, 1.0, 2.5}, {1.0, 2.0, 3.0}};
    CHECK_NOTHROW(ok.validate());
    MarkerSeries dup{{0.0, 1.0, 1.0}, {1.0, 2.0, 3.0}};
    CHECK_THROWS_AS(dup.validate(), DataError);
    MarkerSeries neg{{-0.5, 1.0}, {1.0, 2.0}};
    CHECK_THROWS_AS(neg.validate(), DataError);
    MarkerSeries mismatch{{0.0}, {1.0, 2.0}};
    CHECK_THROWS_AS(mismatch.validate(), DataError);
}

TEST_CASE("subject validation enforces observations before T") {
    auto good = make_subject(2.0, true, {{0.5, 1.5}}, {{1.0, 2.0}});
    CHECK_NOTHROW(good.validate());
    auto late = make_subject(1.0, true, {{0.5, 1.5}}, {{1.0, 2.0}});
    CHECK_THROWS_AS(late.validate(), DataError);
    auto neg_T = make_subject(-1.0, false, {{}}, {{}});
    CHECK_THROWS_AS(neg_T.validate(), DataError);
}

TEST_CASE("failure times are sorted unique uncensored T") {
    Cohort c;
    c.p = 2;
    c.L = 1;
    c.subjects.push_back(make_subject(3.0, true, {{}}, {{}}));
    c.subjects.push_back(make_subject(1.0, true, {{}}, {{}}));
    c.subjects.push_back(make_subject(3.0, true, {{}}, {{}}));  // tie collapses
    c.subjects.push_back(make_subject(2.0, false, {{}}, {{}})); // censored excluded
    c.compute_failure_times();
    CHECK(c.failure_times == std::vector<double>{1.0, 3.0});
}

TEST_CASE("designs are block-diagonal time monomials") {
    auto s = make_subject(4.0, false, {{1.0, 2.0}, {3.0}}, {{5.0, 6.0}, {7.0}});
    DesignPair d = build_designs(s, 1);
    CHECK(d.U.rows() == 3);
    CHECK(d.U.cols() == 4);
    CHECK(d.V.cols() == 4);
    // marker 1 rows touch only the first block
    CHECK(d.U(0, 0) == 1.0);
    CHECK(d.U(0, 1) == 1.0);
    CHECK(d.U(1, 1) == 2.0);
    CHECK(d.U(0, 2) == 0.0);
    CHECK(d.U(2, 2) == 1.0);
    CHECK(d.U(2, 3) == 3.0);
    CHECK(d.V(2, 0) == 0.0);
    CHECK(d.V(2, 2) == 1.0);
    CHECK(d.V(2, 3) == 3.0);

    DesignPair d2 = build_designs(s, 2);
    CHECK(d2.U.cols() == 6);
    CHECK(d2.U(1, 2) == 4.0);  // t^2 at t=2

    Vec y = stacked_values(s);
    CHECK(y.size() == 3);
    CHECK(y[0] == 5.0);
    CHECK(y[2] == 7.0);
}

TEST_CASE("empty subject produces empty designs") {
    auto s = make_subject(1.0, false, {{}, {}}, {{}, {}});
    DesignPair d = build_designs(s);
    CHECK(d.U.rows() == 0);
    CHECK(stacked_values(s).size() == 0);
}

TEST_CASE("csv round trip preserves the cohort") {
    Cohort c;
    c.p = 2;
    c.L = 2;
    auto s1 = make_subject(2.0, true, {{0.25, 1.5}, {1.0}}, {{1.125, -2.5}, {0.75}},
                           (Vec(2) << 0.5, -1.25).finished());
    s1.id = "a";
    auto s2 = make_subject(3.0, false, {{}, {0.5}}, {{}, {42.0}},
                           (Vec(2) << 1.0, 2.0).finished());
    s2.id = "b";
    c.subjects = {s1, s2};
    c.compute_failure_times();

    ColumnSpec schema{{"m1", "m2"}};
    write_cohort_csv(c, schema, "/tmp/flash_subj.csv", "/tmp/flash_long.csv");
    Cohort back = load_cohort("/tmp/flash_subj.csv", "/tmp/flash_long.csv", schema);
    REQUIRE(back.size() == 2);
    CHECK(back.p == 2);
    CHECK(back.subjects[0].id == "a");
    CHECK(back.subjects[0].x[1] == -1.25);
    CHECK(back.subjects[0].markers[0].values[0] == 1.125);
    CHECK(back.subjects[1].event == false);
    CHECK(back.subjects[1].markers[1].times[0] == 0.5);
    CHECK(back.failure_times == std::vector<double>{2.0});
    std::remove("/tmp/flash_subj.csv");
    std::remove("/tmp/flash_long.csv");
}

TEST_CASE("loader rejects malformed inputs") {
    ColumnSpec schema{{"m1"}};
    TempFile subj("s.csv", "id,x1,T,delta\na,1.0,2.0,1\n");

    SUBCASE("unknown subject id") {
        TempFile lon("l.csv", "id,marker,time,value\nzz,m1,0.5,1.0\n");
        CHECK_THROWS_AS(load_cohort(subj.path, lon.path, schema), DataError);
    }
    SUBCASE("unknown marker") {
        TempFile lon("l.csv", "id,marker,time,value\na,m9,0.5,1.0\n");
        CHECK_THROWS_AS(load_cohort(subj.path, lon.path, schema), DataError);
    }
    SUBCASE("duplicate observation time") {
        TempFile lon("l.csv", "id,marker,time,value\na,m1,0.5,1.0\na,m1,0.5,2.0\n");
        CHECK_THROWS_AS(load_cohort(subj.path, lon.path, schema), DataError);
    }
    SUBCASE("observation beyond T") {
        TempFile lon("l.csv", "id,marker,time,value\na,m1,2.5,1.0\n");
        CHECK_THROWS_AS(load_cohort(subj.path, lon.path, schema), DataError);
    }
    SUBCASE("valid file loads") {
        TempFile lon("l.csv", "id,marker,time,value\na,m1,0.5,1.0\n");
        CHECK_NOTHROW(load_cohort(subj.path, lon.path, schema));
    }
}

TEST_CASE("loader rejects bad subjects files") {
    ColumnSpec schema{{"m1"}};
    TempFile lon("l2.csv", "id,marker,time,value\na,m1,0.5,1.0\n");

    SUBCASE("negative T") {
        TempFile subj("s2.csv", "id,x1,T,delta\na,1.0,-2.0,1\n");
        CHECK_THROWS_AS(load_cohort(subj.path, lon.path, schema), DataError);
    }
    SUBCASE("delta outside 0/1") {
        TempFile subj("s2.csv", "id,x1,T,delta\na,1.0,2.0,2\n");
        CHECK_THROWS_AS(load_cohort(subj.path, lon.path, schema), DataError);
    }
    SUBCASE("duplicate id") {
        TempFile subj("s2.csv", "id,x1,T,delta\na,1.0,2.0,1\na,2.0,3.0,0\n");
        CHECK_THROWS_AS(load_cohort(subj.path, lon.path, schema), DataError);
    }
    SUBCASE("bad header") {
        TempFile subj("s2.csv", "id,x1,time,delta\na,1.0,2.0,1\n");
        CHECK_THROWS_AS(load_cohort(subj.path, lon.path, schema), DataError);
    }
}
